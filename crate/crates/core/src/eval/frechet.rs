use super::gaussian::{estimate_gaussian, GaussianStats};
use super::linalg::{reconstruct, sym_eigen, Matrix};
use super::EvalError;
use crate::data::EmbeddingVector;

/// Negative eigenvalue mass tolerated before a covariance counts as non-PSD,
/// relative to its trace.
const PSD_TOLERANCE: f64 = 1e-3;
const PSD_FLOOR: f64 = 1e-12;

fn clamp_check(values: &[f64], trace: f64) -> Result<(), EvalError> {
    let clamped: f64 = values.iter().filter(|l| **l < 0.0).map(|l| -l).sum();
    if clamped > PSD_TOLERANCE * trace.abs() + PSD_FLOOR {
        return Err(EvalError::NonPsd { clamped, trace });
    }
    Ok(())
}

/// Fréchet distance between two Gaussians:
/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^½)`.
///
/// The trace of `(Σ₁Σ₂)^½` is taken as the sum of square roots of the
/// eigenvalues of the symmetric matrix `Σ₁^½ Σ₂ Σ₁^½`, which has the same
/// spectrum. Negative eigenvalues from rounding are clamped to zero. The
/// result is clamped to be non-negative.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let ea = sym_eigen(&a.cov)?;
    clamp_check(&ea.values, a.cov.trace())?;
    let eb = sym_eigen(&b.cov)?;
    clamp_check(&eb.values, b.cov.trace())?;

    let root_a = reconstruct(&ea, |l| l.max(0.0).sqrt());
    let inner: Matrix = root_a.matmul(&b.cov).matmul(&root_a).symmetrized();
    let ei = sym_eigen(&inner)?;
    clamp_check(&ei.values, inner.trace())?;
    let tr_sqrt: f64 = ei.values.iter().map(|l| l.max(0.0).sqrt()).sum();

    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// FID between two embedding sets.
pub fn fid(set_a: &[EmbeddingVector], set_b: &[EmbeddingVector]) -> Result<f64, EvalError> {
    if let (Some(x), Some(y)) = (set_a.first(), set_b.first()) {
        if x.dims() != y.dims() {
            return Err(EvalError::DimensionMismatch {
                left: x.dims(),
                right: y.dims(),
            });
        }
    }
    frechet_distance(&estimate_gaussian(set_a)?, &estimate_gaussian(set_b)?)
}
