//! Fréchet distance between Gaussian fits of image feature distributions.
//!
//! Statistics are accumulated streamingly (count, sum, sum of outer
//! products) so shards computed independently merge associatively to the
//! same result as a single pass. Covariances are unbiased (divide by n-1);
//! implementations differ on this point, so it is pinned here and tested.
//!
//! The distance is
//! `|mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a^1/2 cov_b cov_a^1/2)^1/2)`
//! with matrix square roots taken through symmetric eigendecomposition,
//! negative eigenvalues clamped to zero, and a 1e-6 diagonal bump retried
//! once if the decomposition fails outright.

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::Real;

#[derive(Debug, Error)]
pub enum FidError {
    #[error("need at least 2 feature vectors for covariance, got {0}")]
    InsufficientData(u64),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("statistics come from different extractors: {a:?} vs {b:?}")]
    ExtractorMismatch { a: String, b: String },
    #[error("covariance asymmetry {0:.3e} exceeds 1e-8")]
    AsymmetricCov(f64),
    #[error("eigendecomposition failed even after diagonal regularization: {0}")]
    Numerical(LinalgError),
}

/// Finalized feature statistics for one image set.
#[derive(Debug, Clone, PartialEq)]
pub struct FidStats<R> {
    pub n: u64,
    pub mean: Vec<R>,
    /// Row-major d x d, symmetric.
    pub cov: Vec<R>,
    pub extractor_id: String,
}

impl<R: Real> FidStats<R> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks the symmetry invariant (within 1e-8 of the matrix scale).
    pub fn validate(&self) -> Result<(), FidError> {
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                let gap = (self.cov[i * d + j] - self.cov[j * d + i])
                    .to_f64_lossless()
                    .abs();
                worst = worst.max(gap);
            }
        }
        if worst > 1e-8 {
            return Err(FidError::AsymmetricCov(worst));
        }
        Ok(())
    }
}

/// Streaming accumulator: push feature vectors in any order, merge shards,
/// finalize once n >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct FidAccumulator<R> {
    extractor_id: String,
    dim: usize,
    n: u64,
    sum: Vec<R>,
    outer: Vec<R>,
}

impl<R: Real> FidAccumulator<R> {
    pub fn new(extractor_id: impl Into<String>, dim: usize) -> Self {
        Self {
            extractor_id: extractor_id.into(),
            dim,
            n: 0,
            sum: vec![R::zero(); dim],
            outer: vec![R::zero(); dim * dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn push(&mut self, feature: &[R]) -> Result<(), FidError> {
        if feature.len() != self.dim {
            return Err(FidError::DimMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        self.n += 1;
        for i in 0..self.dim {
            self.sum[i] += feature[i];
            for j in 0..self.dim {
                self.outer[i * self.dim + j] += feature[i] * feature[j];
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &FidAccumulator<R>) -> Result<(), FidError> {
        if other.extractor_id != self.extractor_id {
            return Err(FidError::ExtractorMismatch {
                a: self.extractor_id.clone(),
                b: other.extractor_id.clone(),
            });
        }
        if other.dim != self.dim {
            return Err(FidError::DimMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += *b;
        }
        for (a, b) in self.outer.iter_mut().zip(&other.outer) {
            *a += *b;
        }
        Ok(())
    }

    /// Mean and unbiased covariance `(outer - n mean mean^T) / (n - 1)`.
    pub fn finalize(&self) -> Result<FidStats<R>, FidError> {
        if self.n < 2 {
            return Err(FidError::InsufficientData(self.n));
        }
        let d = self.dim;
        let n = R::from_f64_approx(self.n as f64);
        let denom = R::from_f64_approx((self.n - 1) as f64);
        let mean: Vec<R> = self.sum.iter().map(|&s| s / n).collect();
        let mut cov = vec![R::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (self.outer[i * d + j] - n * mean[i] * mean[j]) / denom;
            }
        }
        // Exact symmetry by construction up to rounding; enforce it.
        for i in 0..d {
            for j in i + 1..d {
                let avg = (cov[i * d + j] + cov[j * d + i]) * R::from_f64_approx(0.5);
                cov[i * d + j] = avg;
                cov[j * d + i] = avg;
            }
        }
        Ok(FidStats {
            n: self.n,
            mean,
            cov,
            extractor_id: self.extractor_id.clone(),
        })
    }
}

/// `tr((a^1/2 b a^1/2)^1/2)` for symmetric PSD-ish matrices, with negative
/// eigenvalues clamped to zero.
fn trace_sqrt_product<R: Real>(a: &[R], b: &[R], d: usize) -> Result<R, LinalgError> {
    let (evals, evecs) = linalg::jacobi_eigen(a, d)?;
    // a^1/2 = v diag(sqrt(max(w,0))) v^T.
    let mut scaled = vec![R::zero(); d * d];
    for k in 0..d {
        let s = if evals[k] > R::zero() {
            evals[k].sqrt()
        } else {
            R::zero()
        };
        for i in 0..d {
            scaled[i * d + k] = evecs[i * d + k] * s;
        }
    }
    let sqrt_a = linalg::mat_mul(&scaled, &linalg::transpose(&evecs, d, d), d, d, d);
    let m = linalg::mat_mul(&linalg::mat_mul(&sqrt_a, b, d, d, d), &sqrt_a, d, d, d);
    let mut sym = vec![R::zero(); d * d];
    let half = R::from_f64_approx(0.5);
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = (m[i * d + j] + m[j * d + i]) * half;
        }
    }
    let (mvals, _) = linalg::jacobi_eigen(&sym, d)?;
    let mut trace = R::zero();
    for v in mvals {
        if v > R::zero() {
            trace += v.sqrt();
        }
    }
    Ok(trace)
}

/// Fréchet distance between two Gaussian fits. Clamped to be >= 0.
pub fn frechet_distance<R: Real>(a: &FidStats<R>, b: &FidStats<R>) -> Result<R, FidError> {
    if a.extractor_id != b.extractor_id {
        return Err(FidError::ExtractorMismatch {
            a: a.extractor_id.clone(),
            b: b.extractor_id.clone(),
        });
    }
    if a.dim() != b.dim() {
        return Err(FidError::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.n < 2 {
        return Err(FidError::InsufficientData(a.n));
    }
    if b.n < 2 {
        return Err(FidError::InsufficientData(b.n));
    }
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    let mut mean_term = R::zero();
    for i in 0..d {
        let diff = a.mean[i] - b.mean[i];
        mean_term += diff * diff;
    }
    let mut trace_ab = R::zero();
    for i in 0..d {
        trace_ab += a.cov[i * d + i] + b.cov[i * d + i];
    }
    let trace_mean = match trace_sqrt_product(&a.cov, &b.cov, d) {
        Ok(t) => t,
        Err(_) => {
            // Bump the diagonals by 1e-6 and retry once.
            let eps = R::from_f64_approx(1e-6);
            let mut ca = a.cov.clone();
            let mut cb = b.cov.clone();
            for i in 0..d {
                ca[i * d + i] += eps;
                cb[i * d + i] += eps;
            }
            trace_sqrt_product(&ca, &cb, d).map_err(FidError::Numerical)?
        }
    };
    let two = R::from_f64_approx(2.0);
    let fid = mean_term + trace_ab - two * trace_mean;
    Ok(if fid < R::zero() { R::zero() } else { fid })
}
