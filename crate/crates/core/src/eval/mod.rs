//! Automatic metrics and human-evaluation aggregation.
//!
//! FID here is computed from first principles over whatever feature
//! extractor the embedding provider supplies, so scores are only comparable
//! within one provider. Covariances use the unbiased `n - 1` divisor.

mod frechet;
mod gaussian;
mod human;
pub mod linalg;
mod similarity;

use thiserror::Error;

use crate::providers::ProviderError;

pub use frechet::{fid, frechet_distance};
pub use gaussian::{estimate_gaussian, estimate_gaussian_rows, estimate_gaussian_with, GaussianStats};
pub use human::{aggregate_scores, Dimension, DimensionSummary, HumanScoreSheet};
pub use linalg::Matrix;
pub use similarity::{
    cosine, dish_similarity, dish_similarity_batch, mean, EmbeddingRow, ScoredPair,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("eigendecomposition did not converge: {0}")]
    NumericalFailure(String),
    #[error("matrix is not positive semi-definite: clamped {clamped:e} of trace {trace:e}")]
    NonPsd { clamped: f64, trace: f64 },
    #[error("score {0} outside the 1/2/3 scale")]
    InvalidScore(i64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}
