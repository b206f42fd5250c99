//! Scaled RBF covariance and constant mean used by the SVGP model.
//!
//! Hyperparameters are stored in log space so unconstrained gradient steps
//! keep the lengthscale and outputscale positive.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_lengthscale: f64,
    pub log_outputscale: f64,
}

impl Default for KernelHyper {
    fn default() -> Self {
        Self { log_lengthscale: 0.0, log_outputscale: 0.0 }
    }
}

impl KernelHyper {
    pub fn new(lengthscale: f64, outputscale: f64) -> Self {
        Self { log_lengthscale: lengthscale.ln(), log_outputscale: outputscale.ln() }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// σ_k², the prior marginal variance.
    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanHyper {
    pub constant: f64,
}

pub fn squared_distance(x1: &[f64], x2: &[f64]) -> f64 {
    debug_assert_eq!(x1.len(), x2.len());
    x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `σ_k² · exp(−‖x1 − x2‖² / (2ℓ²))`
pub fn rbf(x1: &[f64], x2: &[f64], hyper: &KernelHyper) -> f64 {
    let ell = hyper.lengthscale();
    hyper.outputscale() * (-0.5 * squared_distance(x1, x2) / (ell * ell)).exp()
}

/// Partial derivatives of [`rbf`] with respect to `(log_lengthscale, log_outputscale)`.
pub fn rbf_hyper_grad(x1: &[f64], x2: &[f64], hyper: &KernelHyper) -> (f64, f64) {
    let ell2 = hyper.lengthscale().powi(2);
    let r2 = squared_distance(x1, x2);
    let k = hyper.outputscale() * (-0.5 * r2 / ell2).exp();
    (k * r2 / ell2, k)
}

/// Gram matrix between the rows of `xa` and the rows of `xb`.
pub fn kernel_matrix(xa: &Matrix, xb: &Matrix, hyper: &KernelHyper) -> Matrix {
    assert_eq!(xa.cols(), xb.cols(), "kernel_matrix: inconsistent input dimension");
    let ell = hyper.lengthscale();
    let inv_two_ell2 = 0.5 / (ell * ell);
    let scale = hyper.outputscale();
    Matrix::from_fn(xa.rows(), xb.rows(), |i, j| {
        scale * (-squared_distance(xa.row(i), xb.row(j)) * inv_two_ell2).exp()
    })
}

pub fn constant_mean(_x: &[f64], hyper: &MeanHyper) -> f64 {
    hyper.constant
}
