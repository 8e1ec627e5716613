use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Gaussian measurement noise. Residuals are whitened so that
/// `‖W r‖² = rᵀ Σ⁻¹ r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    Isotropic {
        dim: usize,
        sigma: f64,
    },
    Diagonal {
        sigmas: Vec<f64>,
    },
    /// Upper-triangular square-root information `W` with `WᵀW = Σ⁻¹`.
    Full {
        sqrt_info: DMatrix<f64>,
    },
}

impl NoiseModel {
    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(invalid(format!("noise sigma must be positive, got {sigma}")));
        }
        Ok(Self::Isotropic { dim, sigma })
    }

    pub fn diagonal(sigmas: &[f64]) -> Result<Self> {
        if sigmas.is_empty() || !sigmas.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(invalid("diagonal noise sigmas must be positive"));
        }
        Ok(Self::Diagonal { sigmas: sigmas.to_vec() })
    }

    pub fn covariance(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(invalid("covariance must be square and symmetric"));
        }
        let chol = cov.clone().cholesky().ok_or_else(|| invalid("covariance is not positive definite"))?;
        // Σ = L Lᵀ ⇒ Σ⁻¹ = L⁻ᵀ L⁻¹, so W = L⁻¹
        let l_inv = chol.l().try_inverse().ok_or_else(|| invalid("covariance factor is singular"))?;
        Ok(Self::Full { sqrt_info: l_inv })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Isotropic { dim, .. } => *dim,
            Self::Diagonal { sigmas } => sigmas.len(),
            Self::Full { sqrt_info } => sqrt_info.nrows(),
        }
    }

    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Isotropic { sigma, .. } => r / *sigma,
            Self::Diagonal { sigmas } => DVector::from_fn(r.len(), |i, _| r[i] / sigmas[i]),
            Self::Full { sqrt_info } => sqrt_info * r,
        }
    }

    pub fn whiten_matrix(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Isotropic { sigma, .. } => j / *sigma,
            Self::Diagonal { sigmas } => {
                let mut out = j.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= sigmas[i];
                }
                out
            }
            Self::Full { sqrt_info } => sqrt_info * j,
        }
    }

    pub fn mahalanobis_squared(&self, r: &DVector<f64>) -> f64 {
        self.whiten(r).norm_squared()
    }
}

/// Huber loss on the whitened residual norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Huber {
    pub width: f64,
}

impl Huber {
    /// Robust cost `ρ(s)` of a squared whitened norm `s`: quadratic up to the
    /// width, linear in the norm beyond it.
    pub fn cost(&self, s: f64) -> f64 {
        let d2 = self.width * self.width;
        if s <= d2 {
            s
        } else {
            2.0 * self.width * s.sqrt() - d2
        }
    }

    /// `ρ'(s)`, the IRLS weight.
    pub fn weight(&self, s: f64) -> f64 {
        if s <= self.width * self.width {
            1.0
        } else {
            self.width / s.sqrt()
        }
    }
}
