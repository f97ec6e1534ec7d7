use super::linalg::Matrix;
use super::EvalError;
use crate::data::EmbeddingVector;
use crate::par::Execution;

/// Mean and unbiased covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub n: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Matrix, n: usize) -> Result<Self, EvalError> {
        if n < 2 {
            return Err(EvalError::InsufficientSamples(n));
        }
        if mean.len() != cov.n() {
            return Err(EvalError::DimensionMismatch {
                left: mean.len(),
                right: cov.n(),
            });
        }
        let asym = cov.max_asymmetry();
        if asym > 1e-9 {
            return Err(EvalError::NotSymmetric(asym));
        }
        Ok(GaussianStats { mean, cov, n })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

pub fn estimate_gaussian(embeddings: &[EmbeddingVector]) -> Result<GaussianStats, EvalError> {
    estimate_gaussian_with(embeddings, Execution::default())
}

/// Sample mean and `n - 1` covariance, symmetrized. Covariance rows are
/// computed independently (in parallel when enabled); each entry sums over
/// samples in input order, so the result does not depend on scheduling.
pub fn estimate_gaussian_with(
    embeddings: &[EmbeddingVector],
    exec: Execution,
) -> Result<GaussianStats, EvalError> {
    let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.values()).collect();
    estimate_gaussian_rows(&rows, exec)
}

/// Same as [`estimate_gaussian_with`] over raw feature rows, which may
/// include all-zero rows.
pub fn estimate_gaussian_rows(
    embeddings: &[&[f64]],
    exec: Execution,
) -> Result<GaussianStats, EvalError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(EvalError::InsufficientSamples(n));
    }
    let d = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(EvalError::DimensionMismatch {
            left: d,
            right: bad.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // Column-major centered data: one contiguous vector per dimension.
    let centered: Vec<Vec<f64>> = (0..d)
        .map(|i| embeddings.iter().map(|e| e[i] - mean[i]).collect())
        .collect();
    let denom = (n - 1) as f64;
    let rows: Vec<Vec<f64>> = exec.map_range(d, |i| {
        (0..d)
            .map(|j| {
                let s: f64 = centered[i]
                    .iter()
                    .zip(&centered[j])
                    .map(|(a, b)| a * b)
                    .sum();
                s / denom
            })
            .collect()
    });
    let cov = Matrix::from_rows(&rows).symmetrized();
    GaussianStats::new(mean, cov, n)
}
