//! Domain types, the content-addressed blob store and manifest persistence.

mod blob;
pub mod image;
mod manifest;
mod types;

pub use blob::{BlobError, BlobStore};
pub use manifest::{
    decode_manifest, encode_manifest, read_manifest, write_manifest, ManifestError, ManifestRow,
    SCHEMA_VERSION,
};
pub use types::{
    apply_quality_annotations, normalize_name, DiscardReason, DishRecord, EmbeddingError,
    EmbeddingVector, ImageRef, MediaType, PreferencePair, Quality, QualityAnnotation, Status,
    TagSet, TypeError,
};
