//! Contracts for every external model the pipeline calls.
//!
//! Each role is a small trait. Two implementations ship with the crate:
//! [`mock::MockProvider`], which derives every answer from a hash of its
//! inputs, and [`gateway::HttpProvider`], which speaks the JSON-over-HTTP
//! protocol in [`wire`]. [`mock_server`] exposes the mock over that same
//! protocol.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BlobError, BlobStore, EmbeddingVector, ImageRef};

pub mod gateway;
pub mod mock;
pub mod mock_server;
pub mod wire;

pub use gateway::{Backoff, HttpProvider, ProviderEndpoint};
pub use mock::MockProvider;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider timed out")]
    Timeout,
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("blob {0} not found")]
    MissingBlob(String),
    #[error("expected {expected}-dim embedding, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("replacement fraction {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error("unknown fine-tune job {0}")]
    UnknownJob(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("blob storage: {0}")]
    Storage(String),
}

impl ProviderError {
    /// Wire-level `error_code` for this error.
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::Unavailable(_) => "unavailable",
            ProviderError::Timeout => "timeout",
            ProviderError::MalformedResponse(_) => "malformed",
            ProviderError::MissingBlob(_) => "missing_blob",
            ProviderError::DimensionMismatch { .. } => "dimension_mismatch",
            ProviderError::EmptyMask => "empty_mask",
            ProviderError::InvalidRho(_) => "invalid_rho",
            ProviderError::UnknownJob(_) => "unknown_job",
            ProviderError::InvalidInput(_) => "invalid_input",
            ProviderError::Storage(_) => "storage",
        }
    }
}

impl From<BlobError> for ProviderError {
    fn from(e: BlobError) -> Self {
        match e {
            BlobError::MissingBlob(id) => ProviderError::MissingBlob(id),
            other => ProviderError::Storage(other.to_string()),
        }
    }
}

pub type ProviderResult<T> = Result<T, ProviderError>;

/// Axis-aligned box in pixels, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl From<[i64; 4]> for BBox {
    fn from(a: [i64; 4]) -> Self {
        BBox {
            x0: a[0],
            y0: a[1],
            x1: a[2],
            y1: a[3],
        }
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_well_formed(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1 <= i64::from(width) && self.y1 <= i64::from(height)
    }
}

/// Result of the content inspection used by image filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub has_text: bool,
    pub has_watermark: bool,
    pub has_hands: bool,
    pub dish_bbox: Option<BBox>,
}

impl FilterReport {
    pub fn clean(bbox: BBox) -> Self {
        FilterReport {
            has_text: false,
            has_watermark: false,
            has_hands: false,
            dish_bbox: Some(bbox),
        }
    }

    pub fn validate(&self) -> ProviderResult<()> {
        match self.dish_bbox {
            Some(b) if !b.is_well_formed() => Err(ProviderError::MalformedResponse(format!(
                "degenerate bbox {:?}",
                <[i64; 4]>::from(b)
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Done { checkpoint_id: String },
    Failed { message: String },
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Done { .. } | JobState::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub job_id: String,
    pub base_checkpoint: String,
    pub training_image_refs: Vec<ImageRef>,
    #[serde(flatten)]
    pub state: JobState,
}

impl FinetuneJob {
    pub fn validate(&self) -> ProviderResult<()> {
        match &self.state {
            JobState::Done { checkpoint_id } if checkpoint_id.is_empty() => Err(
                ProviderError::MalformedResponse("done job without checkpoint".into()),
            ),
            _ => Ok(()),
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, prompt: &str) -> ProviderResult<String>;
}

pub trait VisionProvider: Send + Sync {
    fn inspect_image(&self, image: &ImageRef) -> ProviderResult<FilterReport>;
    fn caption_image(&self, image: &ImageRef, context: &str) -> ProviderResult<String>;
}

pub trait EmbedProvider: Send + Sync {
    /// Declared output dimensionality.
    fn dims(&self) -> usize;
    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector>;
    fn embed_image(&self, image: &ImageRef) -> ProviderResult<EmbeddingVector>;
}

pub trait EditToolProvider: Send + Sync {
    fn detect(&self, image: &ImageRef, query: &str) -> ProviderResult<Vec<BBox>>;
    fn segment(&self, image: &ImageRef, bbox: BBox) -> ProviderResult<ImageRef>;
    fn inpaint(&self, image: &ImageRef, mask: &ImageRef) -> ProviderResult<ImageRef>;
}

pub trait GenerationProvider: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64, checkpoint_id: &str) -> ProviderResult<ImageRef>;

    /// Prompt-to-prompt pair where `rho` is the fraction of denoising steps
    /// whose attention maps are replaced.
    fn generate_pair(
        &self,
        source_prompt: &str,
        target_prompt: &str,
        rho: f64,
        seed: u64,
        checkpoint_id: &str,
    ) -> ProviderResult<(ImageRef, ImageRef)>;
}

pub trait FinetuneProvider: Send + Sync {
    fn submit_finetune(&self, base_checkpoint: &str, images: &[ImageRef])
        -> ProviderResult<FinetuneJob>;
    fn poll_finetune(&self, job_id: &str) -> ProviderResult<FinetuneJob>;
}

/// One provider per role.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub vision: Arc<dyn VisionProvider>,
    pub embed: Arc<dyn EmbedProvider>,
    pub edit: Arc<dyn EditToolProvider>,
    pub generation: Arc<dyn GenerationProvider>,
    pub finetune: Arc<dyn FinetuneProvider>,
}

impl Providers {
    /// Every role served by the same deterministic mock.
    pub fn mock(store: Arc<BlobStore>, seed: u64) -> Self {
        Providers::from_one(Arc::new(MockProvider::new(store, seed)))
    }

    pub fn from_one<P>(p: Arc<P>) -> Self
    where
        P: ChatProvider
            + VisionProvider
            + EmbedProvider
            + EditToolProvider
            + GenerationProvider
            + FinetuneProvider
            + 'static,
    {
        Providers {
            chat: p.clone(),
            vision: p.clone(),
            embed: p.clone(),
            edit: p.clone(),
            generation: p.clone(),
            finetune: p,
        }
    }
}

pub(crate) fn check_rho(rho: f64) -> ProviderResult<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(ProviderError::InvalidRho(rho))
    }
}

pub(crate) fn check_pair_prompts(source: &str, target: &str) -> ProviderResult<()> {
    if source.trim().is_empty() || target.trim().is_empty() {
        return Err(ProviderError::InvalidInput("empty prompt".into()));
    }
    if source == target {
        return Err(ProviderError::InvalidInput(
            "source and target prompts must differ".into(),
        ));
    }
    Ok(())
}

pub(crate) fn non_empty(what: &str, s: &str) -> ProviderResult<()> {
    if s.trim().is_empty() {
        Err(ProviderError::InvalidInput(format!("empty {what}")))
    } else {
        Ok(())
    }
}
