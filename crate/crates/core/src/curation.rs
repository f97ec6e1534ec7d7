//! Image filtering, dish-name correction and tagging.
//!
//! Records move `Raw -> Filtered -> Corrected -> Tagged`, or drop out as
//! `Discarded(reason)` at the first failing check. Every provider prompt is a
//! template in [`CurationSettings`] with a `{name}` placeholder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize_name, DiscardReason, DishRecord, Status, TagSet};
use crate::eval::{cosine, EvalError};
use crate::providers::{ChatProvider, EmbedProvider, FilterReport, ProviderError, VisionProvider};

pub const DEFAULT_THRESHOLD: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurationError {
    #[error("record {record_id} is {actual}, expected {expected}")]
    InvalidState {
        record_id: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("image inspection failed for {record_id}: {cause}")]
    InspectionFailed {
        record_id: String,
        cause: ProviderError,
    },
    #[error("name correction failed for {record_id}: {cause}")]
    CorrectionFailed {
        record_id: String,
        cause: ProviderError,
    },
    #[error("tagging failed for {record_id}: {message}")]
    TaggingFailed { record_id: String, message: String },
    #[error("tag set has no fields")]
    EmptyTagSet,
}

/// Prompt templates and the similarity threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationSettings {
    pub threshold: f64,
    pub validate_template: String,
    pub correct_template: String,
    pub tags_template: String,
    pub tags_repair_template: String,
}

impl Default for CurationSettings {
    fn default() -> Self {
        CurationSettings {
            threshold: DEFAULT_THRESHOLD,
            validate_template: "VALIDATE: {name}\n\
                Is this the name of a real dish? Answer yes or no."
                .into(),
            correct_template: "CORRECT: {name}\n\
                Return the standard name of this dish without decorations or marketing words."
                .into(),
            tags_template: "TAGS: {name}\n\
                Describe the photo as a JSON object with string keys aesthetic, tableware, \
                background and camera_angle."
                .into(),
            tags_repair_template: "TAGS: {name}\n\
                The previous answer was not valid. Reply with only a JSON object with string \
                keys aesthetic, tableware, background and camera_angle."
                .into(),
        }
    }
}

fn fill(template: &str, name: &str) -> String {
    template.replace("{name}", name)
}

fn expect_status(record: &DishRecord, expected: Status) -> Result<(), CurationError> {
    if record.status == expected {
        Ok(())
    } else {
        Err(CurationError::InvalidState {
            record_id: record.record_id.clone(),
            expected: expected.name(),
            actual: record.status.name(),
        })
    }
}

/// First failing check in the fixed order text, watermark, hands, missing
/// box, box outside the image.
pub fn filter_reason(report: &FilterReport, width: u32, height: u32) -> Option<DiscardReason> {
    if report.has_text {
        Some(DiscardReason::Text)
    } else if report.has_watermark {
        Some(DiscardReason::Watermark)
    } else if report.has_hands {
        Some(DiscardReason::Hands)
    } else {
        match report.dish_bbox {
            None => Some(DiscardReason::MissingBbox),
            Some(b) if !b.within(width, height) => Some(DiscardReason::IncompleteDish),
            Some(_) => None,
        }
    }
}

pub fn filter_record(
    record: &DishRecord,
    report: &FilterReport,
) -> Result<DishRecord, CurationError> {
    expect_status(record, Status::Raw)?;
    let mut out = record.clone();
    match filter_reason(report, record.image.width, record.image.height) {
        Some(reason) => out.discard(reason),
        None => out.status = Status::Filtered,
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameVerdict {
    KeepRaw,
    KeepCorrected(String),
    Discard(DiscardReason),
}

/// Outcome of name correction with the similarity scores behind it.
///
/// `sim_raw` is absent only when the name was rejected as not a dish, in
/// which case no similarity is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameDecision {
    pub verdict: NameVerdict,
    pub sim_raw: Option<f64>,
    pub sim_corrected: Option<f64>,
    pub threshold_used: f64,
}

/// The decision table without the names attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NameChoice {
    Raw,
    Corrected,
    NotADish,
    BelowThreshold,
}

/// Pure decision rule: reject non-dishes, discard when every score is below
/// `threshold`, otherwise keep the higher-scoring name (ties keep raw).
pub fn decide_name(
    valid: bool,
    sim_raw: f64,
    sim_corrected: Option<f64>,
    threshold: f64,
) -> NameChoice {
    if !valid {
        return NameChoice::NotADish;
    }
    let best = sim_corrected.map_or(sim_raw, |c| c.max(sim_raw));
    if best < threshold {
        NameChoice::BelowThreshold
    } else if sim_corrected.is_some_and(|c| c > sim_raw) {
        NameChoice::Corrected
    } else {
        NameChoice::Raw
    }
}

/// Reads a yes/no answer; anything else is a malformed response.
pub fn parse_yes_no(answer: &str) -> Result<bool, ProviderError> {
    let a = answer.trim().trim_matches(|c: char| c == '.' || c == '"').to_lowercase();
    if a == "yes" || a.starts_with("yes") {
        Ok(true)
    } else if a == "no" || a.starts_with("no") {
        Ok(false)
    } else {
        Err(ProviderError::MalformedResponse(format!(
            "expected yes or no, got {answer:?}"
        )))
    }
}

fn similarity(
    embed: &dyn EmbedProvider,
    name: &str,
    image_vec: &crate::data::EmbeddingVector,
) -> Result<f64, ProviderError> {
    let text = embed.embed_text(name)?;
    cosine(&text, image_vec).map_err(|e| match e {
        EvalError::Provider(p) => p,
        EvalError::DimensionMismatch { left, right } => ProviderError::DimensionMismatch {
            expected: right,
            actual: left,
        },
        other => ProviderError::MalformedResponse(other.to_string()),
    })
}

pub fn correct_name(
    record: &DishRecord,
    chat: &dyn ChatProvider,
    embed: &dyn EmbedProvider,
    settings: &CurationSettings,
) -> Result<NameDecision, CurationError> {
    expect_status(record, Status::Filtered)?;
    let fail = |cause| CurationError::CorrectionFailed {
        record_id: record.record_id.clone(),
        cause,
    };
    let threshold = settings.threshold;
    let raw = record.name_raw.as_str();

    let valid = chat
        .chat(&fill(&settings.validate_template, raw))
        .and_then(|a| parse_yes_no(&a))
        .map_err(fail)?;
    if !valid {
        return Ok(NameDecision {
            verdict: NameVerdict::Discard(DiscardReason::NotADish),
            sim_raw: None,
            sim_corrected: None,
            threshold_used: threshold,
        });
    }

    let corrected = chat
        .chat(&fill(&settings.correct_template, raw))
        .map_err(fail)?;
    let corrected = normalize_name(corrected.lines().next().unwrap_or(""));
    if corrected.is_empty() {
        return Err(fail(ProviderError::MalformedResponse(
            "empty corrected name".into(),
        )));
    }

    let image_vec = embed.embed_image(&record.image).map_err(fail)?;
    let sim_raw = similarity(embed, raw, &image_vec).map_err(fail)?;
    let sim_corrected = similarity(embed, &corrected, &image_vec).map_err(fail)?;

    let verdict = match decide_name(true, sim_raw, Some(sim_corrected), threshold) {
        NameChoice::Raw => NameVerdict::KeepRaw,
        NameChoice::Corrected => NameVerdict::KeepCorrected(corrected),
        NameChoice::BelowThreshold => NameVerdict::Discard(DiscardReason::BelowThreshold),
        NameChoice::NotADish => NameVerdict::Discard(DiscardReason::NotADish),
    };
    Ok(NameDecision {
        verdict,
        sim_raw: Some(sim_raw),
        sim_corrected: Some(sim_corrected),
        threshold_used: threshold,
    })
}

/// Applies a decision to a filtered record.
pub fn apply_name_decision(
    record: &DishRecord,
    decision: &NameDecision,
) -> Result<DishRecord, CurationError> {
    expect_status(record, Status::Filtered)?;
    let mut out = record.clone();
    match &decision.verdict {
        NameVerdict::KeepRaw => {
            out.name_final = Some(record.name_raw.clone());
            out.status = Status::Corrected;
        }
        NameVerdict::KeepCorrected(name) => {
            out.name_final = Some(normalize_name(name));
            out.status = Status::Corrected;
        }
        NameVerdict::Discard(reason) => out.discard(reason.clone()),
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawTags {
    aesthetic: Option<String>,
    tableware: Option<String>,
    background: Option<String>,
    camera_angle: Option<String>,
}

fn clean_tag(v: Option<String>) -> Option<String> {
    v.map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

/// Parses a tag answer: the outermost JSON object in the text, with at least
/// one non-empty field.
pub fn parse_tags(answer: &str) -> Result<TagSet, String> {
    let start = answer.find('{').ok_or("no JSON object in answer")?;
    let end = answer.rfind('}').ok_or("no JSON object in answer")?;
    if end < start {
        return Err("no JSON object in answer".into());
    }
    let raw: RawTags =
        serde_json::from_str(&answer[start..=end]).map_err(|e| format!("bad tag JSON: {e}"))?;
    let tags = TagSet {
        aesthetic: clean_tag(raw.aesthetic),
        tableware: clean_tag(raw.tableware),
        background: clean_tag(raw.background),
        camera_angle: clean_tag(raw.camera_angle),
    };
    if tags.is_empty() {
        return Err("tag object has no usable fields".into());
    }
    Ok(tags)
}

/// Tags a corrected record, retrying once with the repair prompt when the
/// first answer cannot be parsed.
pub fn tag_record(
    record: &DishRecord,
    vision: &dyn VisionProvider,
    settings: &CurationSettings,
) -> Result<DishRecord, CurationError> {
    expect_status(record, Status::Corrected)?;
    let name = record.display_name();
    let fail = |message: String| CurationError::TaggingFailed {
        record_id: record.record_id.clone(),
        message,
    };
    let mut last = String::new();
    for template in [&settings.tags_template, &settings.tags_repair_template] {
        let answer = vision
            .caption_image(&record.image, &fill(template, name))
            .map_err(|e| fail(e.to_string()))?;
        match parse_tags(&answer) {
            Ok(tags) => {
                let mut out = record.clone();
                out.tags = Some(tags);
                out.status = Status::Tagged;
                return Ok(out);
            }
            Err(e) => last = e,
        }
    }
    Err(fail(last))
}

/// Renders tags as comma-joined phrases: tableware ("served in ..."),
/// background ("placed on ..."), aesthetic, camera angle.
pub fn render_tags(tags: &TagSet) -> Result<String, CurationError> {
    let parts: Vec<String> = [
        tags.tableware.as_ref().map(|t| format!("served in {t}")),
        tags.background.as_ref().map(|b| format!("placed on {b}")),
        tags.aesthetic.clone(),
        tags.camera_angle.clone(),
    ]
    .into_iter()
    .flatten()
    .collect();
    if parts.is_empty() {
        return Err(CurationError::EmptyTagSet);
    }
    Ok(parts.join(", "))
}

/// Where a record ended up after [`curate_record`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationOutcome {
    pub record: DishRecord,
    pub decision: Option<NameDecision>,
}

/// Runs a raw record through filtering, name correction and tagging,
/// stopping at the first discard.
pub fn curate_record(
    record: &DishRecord,
    vision: &dyn VisionProvider,
    chat: &dyn ChatProvider,
    embed: &dyn EmbedProvider,
    settings: &CurationSettings,
) -> Result<CurationOutcome, CurationError> {
    expect_status(record, Status::Raw)?;
    let report = vision
        .inspect_image(&record.image)
        .and_then(|r| r.validate().map(|_| r))
        .map_err(|cause| CurationError::InspectionFailed {
            record_id: record.record_id.clone(),
            cause,
        })?;
    let filtered = filter_record(record, &report)?;
    if filtered.status != Status::Filtered {
        return Ok(CurationOutcome {
            record: filtered,
            decision: None,
        });
    }
    let decision = correct_name(&filtered, chat, embed, settings)?;
    let corrected = apply_name_decision(&filtered, &decision)?;
    let record = if corrected.status == Status::Corrected {
        tag_record(&corrected, vision, settings)?
    } else {
        corrected
    };
    Ok(CurationOutcome {
        record,
        decision: Some(decision),
    })
}
