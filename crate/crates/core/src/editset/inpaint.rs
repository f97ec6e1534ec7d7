//! Bidirectional add/remove pairs from ingredient inpainting.
//!
//! For each removable element the vision model names, the element is
//! detected, segmented and inpainted away. The (original, inpainted) pair is
//! a "remove" example; swapping the two images gives the matching "add"
//! example.

use super::{pair_id, EditPair, EditType, EditsetError, EditsetSettings, Method, ReviewStatus};
use crate::data::DishRecord;
use crate::providers::{EditToolProvider, ProviderError, VisionProvider};

/// Splits a comma list of elements; `none` or an empty answer means no
/// elements. Duplicates are dropped, first occurrence wins.
pub fn parse_elements(answer: &str) -> Vec<String> {
    let trimmed = answer.trim().trim_end_matches('.');
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") {
        return Vec::new();
    }
    let mut out: Vec<String> = Vec::new();
    for e in trimmed.split([',', '，', '\n']) {
        let e = e.trim_matches(|c: char| c == '.' || c.is_whitespace()).to_lowercase();
        if !e.is_empty() && e != "none" && !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

pub fn build_inpaint_pairs(
    record: &DishRecord,
    vision: &dyn VisionProvider,
    tools: &dyn EditToolProvider,
    settings: &EditsetSettings,
) -> Result<Vec<EditPair>, EditsetError> {
    if record.status.rank().is_none() {
        return Err(EditsetError::InvalidRecord {
            record_id: record.record_id.clone(),
            message: "discarded records are not used for editing pairs".into(),
        });
    }
    let name = record.display_name();
    let answer = vision.caption_image(
        &record.image,
        &settings.elements_template.replace("{name}", name),
    )?;
    let mut pairs = Vec::new();
    for element in parse_elements(&answer) {
        let boxes = tools.detect(&record.image, &element)?;
        let Some(bbox) = boxes.into_iter().next() else {
            tracing::warn!(record = %record.record_id, %element, "element not detected, skipped");
            continue;
        };
        let mask = tools.segment(&record.image, bbox)?;
        let inpainted = match tools.inpaint(&record.image, &mask) {
            Ok(img) => img,
            Err(ProviderError::EmptyMask) => {
                tracing::warn!(record = %record.record_id, %element, "empty mask, skipped");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if inpainted.blob_id == record.image.blob_id {
            tracing::warn!(record = %record.record_id, %element, "inpainting changed nothing, skipped");
            continue;
        }
        let id = |method: &[u8]| {
            pair_id(&[
                method,
                record.record_id.as_bytes(),
                element.as_bytes(),
                record.image.blob_id.as_bytes(),
            ])
        };
        let remove = EditPair {
            pair_id: id(b"inpaint"),
            source: record.image.clone(),
            target: inpainted,
            instruction: settings.remove_template.replace("{element}", &element),
            edit_type: EditType::Remove,
            method: Method::Inpaint,
            rho: None,
            seed: None,
            checkpoint: None,
            record_id: Some(record.record_id.clone()),
            review: ReviewStatus::Pending,
        };
        let add = EditPair {
            pair_id: id(b"inpaint_reversed"),
            source: remove.target.clone(),
            target: remove.source.clone(),
            instruction: settings.add_template.replace("{element}", &element),
            edit_type: EditType::Add,
            method: Method::InpaintReversed,
            ..remove.clone()
        };
        pairs.push(remove);
        pairs.push(add);
    }
    Ok(pairs)
}
