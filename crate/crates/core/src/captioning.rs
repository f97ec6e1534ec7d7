//! Two-stage recaptioning and the caption library used for prompt
//! enhancement at inference time.
//!
//! Recaptioning first asks the chat model for a generic description of the
//! dish name alone, then hands that description to the vision model as
//! context for a fine-grained caption of the image. The library keeps one
//! embedded caption per high-quality record and answers "best caption for
//! this dish given what the user typed".

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize_name, DishRecord, EmbeddingVector, Quality, Status, SCHEMA_VERSION};
use crate::eval::{cosine, EvalError};
use crate::par::Execution;
use crate::providers::{ChatProvider, EmbedProvider, ProviderError, VisionProvider};

/// Appended to every enhanced prompt, exactly once.
pub const QUALITY_SUFFIX: &str = ", high aesthetic quality, high definition";

#[derive(Debug, Error)]
pub enum CaptioningError {
    #[error("dish name is empty")]
    EmptyName,
    #[error("user text is empty")]
    EmptyText,
    #[error("record {record_id} is {actual}, expected Tagged")]
    InvalidState {
        record_id: String,
        actual: &'static str,
    },
    #[error("recaption failed for {record_id}: {cause}")]
    RecaptionFailed {
        record_id: String,
        cause: ProviderError,
    },
    #[error("no record passes the library quality filter")]
    EmptyLibrary,
    #[error("no library entry for dish {0:?}")]
    NoEntryForDish(String),
    #[error("library file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("library file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptioningSettings {
    pub describe_template: String,
    pub recaption_template: String,
    pub rewrite_template: String,
}

impl Default for CaptioningSettings {
    fn default() -> Self {
        CaptioningSettings {
            describe_template: "DESCRIBE: {name}\n\
                Write a generic introduction to this dish: ingredients, cooking method, \
                texture and typical appearance."
                .into(),
            recaption_template: "Introduction to {name}. {description}\n\
                Using this as background, describe the photo in fine detail."
                .into(),
            rewrite_template: "REWRITE:\ncaption: {caption}\nrequest: {request}\n\
                Rewrite the caption so that it matches the request."
                .into(),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Generic description of a dish from its name only.
pub fn describe_dish(
    dish_name: &str,
    chat: &dyn ChatProvider,
    settings: &CaptioningSettings,
) -> Result<String, CaptioningError> {
    let name = normalize_name(dish_name);
    if name.is_empty() {
        return Err(CaptioningError::EmptyName);
    }
    Ok(chat.chat(&settings.describe_template.replace("{name}", &name))?)
}

/// Recaptions a tagged record using the name-only description as context.
pub fn recaption_record(
    record: &DishRecord,
    chat: &dyn ChatProvider,
    vision: &dyn VisionProvider,
    settings: &CaptioningSettings,
) -> Result<DishRecord, CaptioningError> {
    if record.status != Status::Tagged {
        return Err(CaptioningError::InvalidState {
            record_id: record.record_id.clone(),
            actual: record.status.name(),
        });
    }
    let fail = |cause| CaptioningError::RecaptionFailed {
        record_id: record.record_id.clone(),
        cause,
    };
    let name = record.display_name();
    let description = match describe_dish(name, chat, settings) {
        Ok(d) => d,
        Err(CaptioningError::Provider(cause)) => return Err(fail(cause)),
        Err(e) => return Err(e),
    };
    let context = settings
        .recaption_template
        .replace("{name}", name)
        .replace("{description}", &one_line(&description));
    let caption = vision.caption_image(&record.image, &context).map_err(fail)?;
    let caption = one_line(&caption);
    if caption.is_empty() {
        return Err(fail(ProviderError::MalformedResponse("empty caption".into())));
    }
    let mut out = record.clone();
    out.recaption = Some(caption);
    out.status = Status::Recaptioned;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFilter {
    Any,
    #[default]
    #[serde(alias = "ultra_high")]
    Ultra,
}

impl QualityFilter {
    pub fn admits(self, q: Quality) -> bool {
        match self {
            QualityFilter::Any => true,
            QualityFilter::Ultra => q == Quality::UltraHigh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub entry_id: String,
    pub dish_name: String,
    pub caption: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryHeader {
    schema_version: String,
    dims: usize,
    count: usize,
}

/// Immutable caption library. Entries are kept sorted by `entry_id`, so
/// every index list is in ascending id order too.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionLibrary {
    dims: usize,
    entries: Vec<CaptionEntry>,
    index: BTreeMap<String, Vec<usize>>,
}

fn lookup_key(name: &str) -> String {
    normalize_name(name)
}

impl CaptionLibrary {
    pub fn new(dims: usize, mut entries: Vec<CaptionEntry>) -> Result<Self, String> {
        if dims == 0 {
            return Err("library dims must be positive".into());
        }
        entries.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].entry_id == w[1].entry_id) {
            return Err(format!("duplicate entry id {}", w[0].entry_id));
        }
        let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.caption.trim().is_empty() {
                return Err(format!("entry {} has an empty caption", e.entry_id));
            }
            if e.embedding.dims() != dims {
                return Err(format!(
                    "entry {} has {} dims, library has {dims}",
                    e.entry_id,
                    e.embedding.dims()
                ));
            }
            index.entry(lookup_key(&e.dish_name)).or_default().push(i);
        }
        Ok(CaptionLibrary {
            dims,
            entries,
            index,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CaptionEntry] {
        &self.entries
    }

    pub fn dish_names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Entries for a dish, in ascending `entry_id` order.
    pub fn entries_for(&self, dish_name: &str) -> Vec<&CaptionEntry> {
        self.index
            .get(&lookup_key(dish_name))
            .map(|ids| ids.iter().map(|&i| &self.entries[i]).collect())
            .unwrap_or_default()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = LibraryHeader {
            schema_version: SCHEMA_VERSION.into(),
            dims: self.dims,
            count: self.entries.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for e in &self.entries {
            out.extend(serde_json::to_vec(e).expect("entry serializes"));
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CaptioningError> {
        let io = |source| CaptioningError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CaptioningError> {
        let io = |source| CaptioningError::Io {
            path: path.to_path_buf(),
            source,
        };
        let format = |message: String| CaptioningError::Format {
            path: path.to_path_buf(),
            message,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut lines = reader.lines();
        let header: LibraryHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line.map_err(io)?)
                .map_err(|e| format(format!("line 1: {e}")))?,
            None => return Err(format("missing header".into())),
        };
        if !header.schema_version.starts_with("dishforge/") {
            return Err(format(format!(
                "unsupported schema {}",
                header.schema_version
            )));
        }
        let mut entries = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line).map_err(|e| format(format!("line {}: {e}", i + 2)))?,
            );
        }
        if entries.len() != header.count {
            return Err(format(format!(
                "header says {} entries, found {}",
                header.count,
                entries.len()
            )));
        }
        CaptionLibrary::new(header.dims, entries).map_err(format)
    }
}

/// One entry per recaptioned record that passes `filter`, embedded from its
/// caption. Entry ids are record ids.
pub fn build_library(
    records: &[DishRecord],
    embed: &dyn EmbedProvider,
    filter: QualityFilter,
    exec: Execution,
) -> Result<CaptionLibrary, CaptioningError> {
    let passing: Vec<&DishRecord> = records
        .iter()
        .filter(|r| r.status == Status::Recaptioned && filter.admits(r.quality()))
        .filter(|r| r.recaption.as_deref().is_some_and(|c| !c.trim().is_empty()))
        .collect();
    if passing.is_empty() {
        return Err(CaptioningError::EmptyLibrary);
    }
    let dims = embed.dims();
    let entries = exec.try_map(&passing, |r| {
        let caption = r.recaption.clone().unwrap_or_default();
        let embedding = embed.embed_text(&caption)?;
        if embedding.dims() != dims {
            return Err(ProviderError::DimensionMismatch {
                expected: dims,
                actual: embedding.dims(),
            });
        }
        Ok(CaptionEntry {
            entry_id: r.record_id.clone(),
            dish_name: normalize_name(r.display_name()),
            caption,
            embedding,
        })
    })?;
    CaptionLibrary::new(dims, entries).map_err(|message| CaptioningError::Format {
        path: PathBuf::new(),
        message,
    })
}

/// Argmax of cosine against `query` among the dish's entries; ties go to
/// the lowest entry id.
pub fn retrieve_with_query<'a>(
    library: &'a CaptionLibrary,
    dish_name: &str,
    query: &EmbeddingVector,
) -> Result<&'a CaptionEntry, CaptioningError> {
    let mut best: Option<(&CaptionEntry, f64)> = None;
    for entry in library.entries_for(dish_name) {
        let s = cosine(query, &entry.embedding)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((entry, s));
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| CaptioningError::NoEntryForDish(dish_name.to_string()))
}

/// Best caption for `dish_name` given the full user text.
pub fn retrieve_caption<'a>(
    library: &'a CaptionLibrary,
    dish_name: &str,
    user_text: &str,
    embed: &dyn EmbedProvider,
) -> Result<&'a CaptionEntry, CaptioningError> {
    if library.entries_for(dish_name).is_empty() {
        return Err(CaptioningError::NoEntryForDish(dish_name.to_string()));
    }
    let query = embed.embed_text(user_text)?;
    retrieve_with_query(library, dish_name, &query)
}

/// A retrieval request: dish name and user text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionQuery {
    pub dish_name: String,
    pub user_text: String,
}

/// Retrieves for many queries; entry ids in input order, `None` when the
/// dish has no entries.
pub fn retrieve_batch(
    library: &CaptionLibrary,
    queries: &[CaptionQuery],
    embed: &dyn EmbedProvider,
    exec: Execution,
) -> Result<Vec<Option<String>>, CaptioningError> {
    exec.try_map(queries, |q| {
        match retrieve_caption(library, &q.dish_name, &q.user_text, embed) {
            Ok(e) => Ok(Some(e.entry_id.clone())),
            Err(CaptioningError::NoEntryForDish(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })
}

/// Removes every copy of the quality suffix and appends it once.
pub fn with_quality_suffix(text: &str) -> String {
    let mut base = text.replace(QUALITY_SUFFIX, "");
    while base.contains(QUALITY_SUFFIX) {
        base = base.replace(QUALITY_SUFFIX, "");
    }
    let trimmed = base.trim_end_matches([' ', ',']).len();
    base.truncate(trimmed);
    format!("{}{QUALITY_SUFFIX}", base.trim_start())
}

/// Retrieve, rewrite toward the user's request, then append the quality
/// suffix. Dishes missing from the library fall back to the user text.
pub fn enhance_prompt(
    library: &CaptionLibrary,
    user_text: &str,
    dish_name: &str,
    chat: &dyn ChatProvider,
    embed: &dyn EmbedProvider,
    settings: &CaptioningSettings,
) -> Result<String, CaptioningError> {
    let request = one_line(&user_text.replace(QUALITY_SUFFIX, ""));
    if request.is_empty() {
        return Err(CaptioningError::EmptyText);
    }
    let entry = match retrieve_caption(library, dish_name, user_text, embed) {
        Ok(e) => e,
        Err(CaptioningError::NoEntryForDish(_)) => return Ok(with_quality_suffix(&request)),
        Err(e) => return Err(e),
    };
    let prompt = settings
        .rewrite_template
        .replace("{caption}", &one_line(&entry.caption))
        .replace("{request}", &request);
    let rewritten = chat.chat(&prompt)?;
    Ok(with_quality_suffix(&one_line(&rewritten)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn entry(id: &str, dish: &str, e: &[f64]) -> CaptionEntry {
        CaptionEntry {
            entry_id: id.into(),
            dish_name: dish.into(),
            caption: format!("caption {id}"),
            embedding: v(e),
        }
    }

    #[test]
    fn suffix_exactly_once() {
        let once = with_quality_suffix("steamed buns");
        assert_eq!(once, "steamed buns, high aesthetic quality, high definition");
        assert_eq!(with_quality_suffix(&once), once);
        let twice = format!("{once}{QUALITY_SUFFIX}");
        assert_eq!(with_quality_suffix(&twice), once);
    }

    #[test]
    fn argmax_and_ties() {
        // Cosines against (1,0): 0.4, 0.9, 0.7 (unit vectors at those x).
        let unit = |x: f64| [x, (1.0 - x * x).sqrt()];
        let lib = CaptionLibrary::new(
            2,
            vec![
                entry("e1", "鱼香肉丝", &unit(0.4)),
                entry("e2", "鱼香肉丝", &unit(0.9)),
                entry("e3", "鱼香肉丝", &unit(0.7)),
                entry("e4", "麻婆豆腐", &unit(1.0)),
            ],
        )
        .unwrap();
        let q = v(&[1.0, 0.0]);
        assert_eq!(retrieve_with_query(&lib, "鱼香肉丝", &q).unwrap().entry_id, "e2");

        let tied = CaptionLibrary::new(
            2,
            vec![entry("b", "x", &[1.0, 1.0]), entry("a", "x", &[2.0, 2.0])],
        )
        .unwrap();
        assert_eq!(retrieve_with_query(&tied, "x", &q).unwrap().entry_id, "a");
        assert!(matches!(
            retrieve_with_query(&lib, "驴打滚", &q),
            Err(CaptioningError::NoEntryForDish(_))
        ));
    }

    #[test]
    fn lookup_trims_and_normalizes() {
        let lib = CaptionLibrary::new(2, vec![entry("a", "Cafe\u{301}", &[1.0, 0.0])]).unwrap();
        assert_eq!(lib.entries_for("  Caf\u{e9} ").len(), 1);
    }

    #[test]
    fn library_rejects_bad_entries() {
        assert!(CaptionLibrary::new(3, vec![entry("a", "x", &[1.0, 0.0])]).is_err());
        assert!(CaptionLibrary::new(
            2,
            vec![entry("a", "x", &[1.0, 0.0]), entry("a", "y", &[1.0, 0.0])]
        )
        .is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.jsonl");
        let lib = CaptionLibrary::new(
            2,
            vec![
                entry("b", "x", &[0.1, 1.0 / 3.0]),
                entry("a", "x", &[std::f64::consts::PI, -1e-300]),
            ],
        )
        .unwrap();
        lib.save(&path).unwrap();
        let back = CaptionLibrary::load(&path).unwrap();
        assert_eq!(back, lib);
        assert_eq!(std::fs::read(&path).unwrap(), lib.to_bytes());
    }
}
