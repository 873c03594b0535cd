//! Gaussian statistics of feature sets and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigenvalues in `[-NEG_EIG_TOL, 0)` are rounding noise and clamp to zero;
/// anything below is reported as a numerical failure.
pub const NEG_EIG_TOL: f64 = 1e-8;
/// A final distance in `[-NEG_RESULT_TOL, 0)` clamps to zero.
pub const NEG_RESULT_TOL: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    mean: Vec<f64>,
    /// Row-major `D x D`.
    cov: Vec<f64>,
    count: usize,
}

impl FrechetStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::shape("frechet_stats", format!("mean of {d} with covariance of {} entries", cov.len())));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    /// Sample mean and unbiased (`N - 1`) covariance of `[N, D]` features.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, d) = features.dims2("frechet_stats")?;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 samples for a covariance, got {n}")));
        }
        let rows = || features.data().chunks_exact(d);
        let mut mean = vec![0.0f64; d];
        for r in rows() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0f64; d * d];
        let mut centered = vec![0.0f64; d];
        for r in rows() {
            for ((c, &v), m) in centered.iter_mut().zip(r).zip(&mean) {
                *c = v as f64 - m;
            }
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Fewer than `D + 1` samples cannot give a full-rank covariance.
    pub fn is_rank_deficient(&self) -> bool {
        self.count < self.dim() + 1
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

fn clamped_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    for (i, v) in eig.eigenvalues.iter_mut().enumerate() {
        if *v < -NEG_EIG_TOL {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {v:e} at index {i}, below -{NEG_EIG_TOL:e}; covariance is not PSD"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the square root taken from the eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let mu = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());

    let ea = clamped_eigenvalues(sa.clone(), "first covariance")?;
    let sqrt_vals = ea.eigenvalues.map(f64::sqrt);
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let mut inner = &sqrt_a * &sb * &sqrt_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let ei = clamped_eigenvalues(inner, "sqrt(S_a) S_b sqrt(S_a)")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();

    let fd = mu.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if fd < -NEG_RESULT_TOL {
        return Err(Error::Numerical(format!("Fréchet distance came out negative ({fd:e})")));
    }
    Ok(fd.max(0.0))
}
