use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use super::manifest::ManifestRow;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("invalid blob id {0:?}")]
    InvalidBlobId(String),
    #[error("image dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("tag field {0} is empty or untrimmed")]
    BadTag(&'static str),
    #[error("preference pair has identical win and lose images")]
    IdenticalPreference,
    #[error("record {record_id}: {message}")]
    InvalidRecord { record_id: String, message: String },
}

/// Unicode NFC plus surrounding-whitespace trim.
pub fn normalize_name(name: &str) -> String {
    name.trim().nfc().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Jpeg,
    Png,
}

impl MediaType {
    pub fn extension(self) -> &'static str {
        match self {
            MediaType::Jpeg => "jpg",
            MediaType::Png => "png",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Jpeg => "image/jpeg",
            MediaType::Png => "image/png",
        }
    }
}

/// A stored image, addressed by the SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawImageRef")]
pub struct ImageRef {
    pub blob_id: String,
    pub width: u32,
    pub height: u32,
    pub media_type: MediaType,
}

#[derive(Deserialize)]
struct RawImageRef {
    blob_id: String,
    width: u32,
    height: u32,
    media_type: MediaType,
}

impl TryFrom<RawImageRef> for ImageRef {
    type Error = TypeError;

    fn try_from(r: RawImageRef) -> Result<Self, Self::Error> {
        ImageRef::new(r.blob_id, r.width, r.height, r.media_type)
    }
}

impl ImageRef {
    pub fn new(
        blob_id: String,
        width: u32,
        height: u32,
        media_type: MediaType,
    ) -> Result<Self, TypeError> {
        let valid_id = blob_id.len() == 64
            && blob_id
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !valid_id {
            return Err(TypeError::InvalidBlobId(blob_id));
        }
        if width == 0 || height == 0 {
            return Err(TypeError::ZeroDimension { width, height });
        }
        Ok(ImageRef {
            blob_id,
            width,
            height,
            media_type,
        })
    }
}

/// Machine-readable reason a record left the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Text,
    Watermark,
    Hands,
    MissingBbox,
    IncompleteDish,
    NotADish,
    BelowThreshold,
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiscardReason::Text => "text",
            DiscardReason::Watermark => "watermark",
            DiscardReason::Hands => "hands",
            DiscardReason::MissingBbox => "missing_bbox",
            DiscardReason::IncompleteDish => "incomplete_dish",
            DiscardReason::NotADish => "not_a_dish",
            DiscardReason::BelowThreshold => "below_threshold",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Raw,
    Filtered,
    Corrected,
    Tagged,
    Recaptioned,
    Discarded(DiscardReason),
}

impl Status {
    /// Position along the curation path; `None` for discarded records.
    pub fn rank(&self) -> Option<u8> {
        match self {
            Status::Raw => Some(0),
            Status::Filtered => Some(1),
            Status::Corrected => Some(2),
            Status::Tagged => Some(3),
            Status::Recaptioned => Some(4),
            Status::Discarded(_) => None,
        }
    }

    pub fn at_least(&self, other: &Status) -> bool {
        match (self.rank(), other.rank()) {
            (Some(a), Some(b)) => a >= b,
            _ => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Status::Raw => "raw",
            Status::Filtered => "filtered",
            Status::Corrected => "corrected",
            Status::Tagged => "tagged",
            Status::Recaptioned => "recaptioned",
            Status::Discarded(_) => "discarded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Standard,
    UltraHigh,
}

/// The four tag dimensions attached to a curated image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TagSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aesthetic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tableware: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle: Option<String>,
}

impl TagSet {
    pub fn is_empty(&self) -> bool {
        self.aesthetic.is_none()
            && self.tableware.is_none()
            && self.background.is_none()
            && self.camera_angle.is_none()
    }

    pub fn len(&self) -> usize {
        [
            &self.aesthetic,
            &self.tableware,
            &self.background,
            &self.camera_angle,
        ]
        .iter()
        .filter(|f| f.is_some())
        .count()
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        let fields = [
            ("aesthetic", &self.aesthetic),
            ("tableware", &self.tableware),
            ("background", &self.background),
            ("camera_angle", &self.camera_angle),
        ];
        for (name, value) in fields {
            if let Some(v) = value {
                if v.is_empty() || v.trim() != v {
                    return Err(TypeError::BadTag(name));
                }
            }
        }
        Ok(())
    }
}

/// One dish name/image pair moving through curation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishRecord {
    pub record_id: String,
    pub name_raw: String,
    #[serde(default)]
    pub name_final: Option<String>,
    pub image: ImageRef,
    pub status: Status,
    #[serde(default)]
    pub tags: Option<TagSet>,
    #[serde(default)]
    pub recaption: Option<String>,
    #[serde(default = "standard_quality")]
    quality: Quality,
    #[serde(default)]
    pub preference_group: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

fn standard_quality() -> Quality {
    Quality::Standard
}

impl DishRecord {
    /// A fresh raw record; the name is NFC-normalized.
    pub fn new(record_id: impl Into<String>, name_raw: &str, image: ImageRef) -> Self {
        DishRecord {
            record_id: record_id.into(),
            name_raw: normalize_name(name_raw),
            name_final: None,
            image,
            status: Status::Raw,
            tags: None,
            recaption: None,
            quality: Quality::Standard,
            preference_group: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn quality(&self) -> Quality {
        self.quality
    }

    /// Name used downstream: the final name when set, else the raw one.
    pub fn display_name(&self) -> &str {
        self.name_final.as_deref().unwrap_or(&self.name_raw)
    }

    pub fn discard(&mut self, reason: DiscardReason) {
        self.status = Status::Discarded(reason);
    }

    pub fn check_invariants(&self) -> Result<(), TypeError> {
        let err = |message: &str| TypeError::InvalidRecord {
            record_id: self.record_id.clone(),
            message: message.to_string(),
        };
        if self.record_id.is_empty() {
            return Err(err("empty record id"));
        }
        if self.status.at_least(&Status::Corrected) && self.name_final.is_none() {
            return Err(err("corrected record without name_final"));
        }
        if let Some(tags) = &self.tags {
            tags.validate()?;
        }
        Ok(())
    }
}

impl ManifestRow for DishRecord {
    fn sort_key(&self) -> String {
        self.record_id.clone()
    }

    fn validate(&self) -> Result<(), String> {
        self.check_invariants().map_err(|e| e.to_string())
    }
}

/// Manual quality annotation; the only way a record becomes `UltraHigh`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityAnnotation {
    pub record_id: String,
    pub quality: Quality,
}

impl ManifestRow for QualityAnnotation {
    fn sort_key(&self) -> String {
        self.record_id.clone()
    }
}

/// Applies manual annotations by record id; returns how many records matched.
pub fn apply_quality_annotations(
    records: &mut [DishRecord],
    annotations: &[QualityAnnotation],
) -> usize {
    let by_id: BTreeMap<&str, Quality> = annotations
        .iter()
        .map(|a| (a.record_id.as_str(), a.quality))
        .collect();
    let mut hits = 0;
    for r in records.iter_mut() {
        if let Some(q) = by_id.get(r.record_id.as_str()) {
            r.quality = *q;
            hits += 1;
        }
    }
    hits
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("embedding must have at least one dimension")]
    Empty,
    #[error("embedding contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("declared dims {declared} but got {actual} values")]
    DimsMismatch { declared: usize, actual: usize },
}

/// A finite, non-zero real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbedding", into = "RawEmbedding")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawEmbedding {
    dims: usize,
    values: Vec<f64>,
}

impl TryFrom<RawEmbedding> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(r: RawEmbedding) -> Result<Self, Self::Error> {
        if r.dims != r.values.len() {
            return Err(EmbeddingError::DimsMismatch {
                declared: r.dims,
                actual: r.values.len(),
            });
        }
        EmbeddingVector::new(r.values)
    }
}

impl From<EmbeddingVector> for RawEmbedding {
    fn from(e: EmbeddingVector) -> Self {
        RawEmbedding {
            dims: e.values.len(),
            values: e.values,
        }
    }
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Result<Self, EmbeddingError> {
        EmbeddingVector::new(self.values.iter().map(|v| v * s).collect())
    }
}

/// A human A-vs-B judgement used for preference optimization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPreference")]
pub struct PreferencePair {
    pub prompt: String,
    pub image_win: ImageRef,
    pub image_lose: ImageRef,
    pub annotator_id: String,
}

#[derive(Deserialize)]
struct RawPreference {
    prompt: String,
    image_win: ImageRef,
    image_lose: ImageRef,
    annotator_id: String,
}

impl TryFrom<RawPreference> for PreferencePair {
    type Error = TypeError;

    fn try_from(r: RawPreference) -> Result<Self, Self::Error> {
        PreferencePair::new(r.prompt, r.image_win, r.image_lose, r.annotator_id)
    }
}

impl PreferencePair {
    pub fn new(
        prompt: String,
        image_win: ImageRef,
        image_lose: ImageRef,
        annotator_id: String,
    ) -> Result<Self, TypeError> {
        if image_win.blob_id == image_lose.blob_id {
            return Err(TypeError::IdenticalPreference);
        }
        Ok(PreferencePair {
            prompt,
            image_win,
            image_lose,
            annotator_id,
        })
    }
}

impl ManifestRow for PreferencePair {
    fn sort_key(&self) -> String {
        format!(
            "{}\u{0}{}\u{0}{}\u{0}{}",
            self.prompt, self.annotator_id, self.image_win.blob_id, self.image_lose.blob_id
        )
    }
}
