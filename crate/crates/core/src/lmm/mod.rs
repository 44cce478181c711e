//! Likelihood, estimation and prediction for the stacked mixed model
//!
//! ```text
//! y = X theta + Z_s b + Z_u u + e,   b_k ~ N(0, I / lambda_k),
//! (u1_i, u2_i) ~ N(0, Sigma_u),      e ~ N(0, sigma_eps^2 diag(1, delta^2) x Corr)
//! ```
//!
//! Two evaluation paths share this model. [`covariance`] builds the marginal
//! covariance `V` as a per-subject operator and evaluates the criteria from
//! their textbook definitions. The estimation path in [`mme`] works with the
//! Henderson equations instead, profiles `sigma_eps^2` out and supplies
//! analytic gradients; it never touches anything larger than the spline
//! column count.

pub mod covariance;
mod fit;
mod mme;
pub mod optimize;

pub use covariance::{
    blups, gls_fixed_effects, marginal_covariance, ml_criterion, ml_value, reml_criterion,
    reml_value, Covariance, CovarianceOperator, DenseCovariance,
};
pub use fit::{
    fit, fit_with, Diagnostics, FitOptions, FittedModel, Fitter, ParameterInterval,
    SurfacePrediction, MODEL_FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::DesignError;

#[derive(Debug, Error)]
pub enum LmmError {
    #[error("matrix is not positive definite: {0}")]
    NonPositiveDefinite(String),
    #[error("fixed-effect cross-product matrix is singular")]
    RankDeficientX,
    #[error(
        "optimizer did not converge after {iterations} iterations \
         (criterion {criterion:.6}, gradient max-norm {gradient_norm:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        criterion: f64,
        gradient_norm: f64,
    },
    #[error("invalid variance components: {0}")]
    InvalidVariance(String),
    #[error("unknown group {0}")]
    UnknownGroup(usize),
    #[error("unknown outcome {0} (expected 1 or 2)")]
    UnknownOutcome(usize),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Variance parameters on their natural scale.
///
/// `log_lambda` and `log_varphi` hold the log smoothing parameters of the
/// penalized outcome-1 and outcome-2 surfaces, in surface order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub log_lambda: Vec<f64>,
    pub log_varphi: Vec<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub rho: f64,
    pub sigma_eps_sq: f64,
    pub delta: f64,
    pub ar_corr: Option<f64>,
}

impl VarianceComponents {
    pub fn validate(&self) -> Result<(), LmmError> {
        let bad = |what: &str| Err(LmmError::InvalidVariance(what.to_string()));
        if !(self.sigma1_sq > 0.0 && self.sigma2_sq > 0.0 && self.sigma_eps_sq > 0.0) {
            return bad("variances must be positive");
        }
        if !(self.rho.abs() < 1.0) {
            return bad("rho must lie in (-1, 1)");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if let Some(phi) = self.ar_corr {
            if !(0.0..1.0).contains(&phi) {
                return bad("ar_corr must lie in [0, 1)");
            }
        }
        if self.smoothing().iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return bad("smoothing parameters must be positive and finite");
        }
        if ![self.sigma1_sq, self.sigma2_sq, self.sigma_eps_sq].iter().all(|v| v.is_finite()) {
            return bad("variances must be finite");
        }
        Ok(())
    }

    /// Smoothing parameters of all penalized surfaces in column order.
    pub fn smoothing(&self) -> Vec<f64> {
        self.log_lambda
            .iter()
            .chain(&self.log_varphi)
            .map(|l| l.exp())
            .collect()
    }

    /// Subject-effect covariance `Sigma_u`.
    pub fn sigma_u(&self) -> [[f64; 2]; 2] {
        let c = self.rho * (self.sigma1_sq * self.sigma2_sq).sqrt();
        [[self.sigma1_sq, c], [c, self.sigma2_sq]]
    }
}
