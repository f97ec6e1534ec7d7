//! Data machinery for faithful dish image generation and editing.
//!
//! The crate covers the full offline pipeline around pluggable model
//! providers: curation of dish name/image pairs, two-stage recaptioning, a
//! caption library for prompt enhancement, coarse-to-fine training manifests,
//! editing-pair construction with human review, and evaluation metrics.
//!
//! Every model call goes through the traits in [`providers`]. The
//! [`providers::mock`] implementations are deterministic, so the whole
//! pipeline can run and be tested without any network or GPU.

pub mod captioning;
pub mod config;
pub mod curation;
pub mod data;
pub mod editset;
pub mod eval;
pub mod hashing;
mod httputil;
pub mod par;
pub mod pipeline;
pub mod providers;
pub mod schedule;
pub mod server;
pub mod synth;

pub use httputil::ServerHandle;
pub use data::{
    BlobStore, DiscardReason, DishRecord, EmbeddingVector, ImageRef, MediaType, PreferencePair,
    Quality, Status, TagSet,
};
