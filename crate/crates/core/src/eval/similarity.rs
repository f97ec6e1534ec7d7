use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{EmbeddingVector, ImageRef, ManifestRow};
use crate::par::Execution;
use crate::providers::EmbedProvider;

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Dish text-to-image similarity: cosine between the name's text embedding
/// and the image embedding.
pub fn dish_similarity(
    dish_name: &str,
    image: &ImageRef,
    embed: &dyn EmbedProvider,
) -> Result<f64, EvalError> {
    let t = embed.embed_text(dish_name)?;
    let i = embed.embed_image(image)?;
    cosine(&t, &i)
}

/// A (dish name, image) pair to score; rows of `eval dishsim` input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    pub dish_name: String,
    pub image: ImageRef,
}

impl ManifestRow for ScoredPair {
    fn sort_key(&self) -> String {
        self.id.clone()
    }
}

pub fn dish_similarity_batch(
    pairs: &[ScoredPair],
    embed: &dyn EmbedProvider,
    exec: Execution,
) -> Result<Vec<f64>, EvalError> {
    exec.try_map(pairs, |p| dish_similarity(&p.dish_name, &p.image, embed))
}

/// Arithmetic mean in input order; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Row of an embedding file: `{id, values}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub values: Vec<f64>,
}

impl EmbeddingRow {
    pub fn embedding(&self) -> Result<EmbeddingVector, String> {
        EmbeddingVector::new(self.values.clone()).map_err(|e| e.to_string())
    }
}

impl ManifestRow for EmbeddingRow {
    fn sort_key(&self) -> String {
        self.id.clone()
    }

    fn validate(&self) -> Result<(), String> {
        self.embedding().map(|_| ())
    }
}
