//! Sensitivity, noise calibration and residual-versus-bound checks for
//! certified removal.
//!
//! All residuals are in summed-loss units (see [`crate::federation`]).

use serde::{Deserialize, Serialize};

use crate::data::PartitionedData;
use crate::error::{Error, Result};
use crate::federation::FederationState;
use crate::numerics::Matrix;

/// Slack allowed when comparing a residual against its bound.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertParams {
    pub epsilon: f64,
    pub c: f64,
    pub tau: f64,
    /// Lipschitz constant of the loss gradient in the parameters.
    #[serde(default = "one")]
    pub gamma: f64,
    /// Lipschitz constant of the loss gradient in the features.
    #[serde(default = "one")]
    pub gamma_z: f64,
    pub n: usize,
    #[serde(default)]
    pub lambda: f64,
}

fn one() -> f64 {
    1.0
}

impl CertParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.c >= 0.0) {
            return Err(Error::invalid(format!("c must be >= 0, got {}", self.c)));
        }
        if !(self.tau >= 0.0) || !(self.gamma > 0.0) || !(self.gamma_z > 0.0) {
            return Err(Error::invalid("tau must be >= 0 and gamma, gamma_z > 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        Ok(())
    }
}

/// `(M, |Z|)`: summed per-feature maximum change and the number of changed rows.
pub fn perturbation_magnitude(old: &Matrix, new: &Matrix) -> Result<(f64, usize)> {
    if old.shape() != new.shape() {
        return Err(Error::ShapeMismatch {
            op: "perturbation_magnitude",
            left: old.shape(),
            right: new.shape(),
        });
    }
    let mut column_max = vec![0.0f64; old.cols()];
    let mut rows = 0;
    for r in 0..old.rows() {
        let mut changed = false;
        for (j, (a, b)) in old.row(r).iter().zip(new.row(r)).enumerate() {
            let diff = (a - b).abs();
            if diff > 0.0 {
                changed = true;
                column_max[j] = column_max[j].max(diff);
            }
        }
        rows += usize::from(changed);
    }
    Ok((column_max.iter().sum(), rows))
}

/// [`perturbation_magnitude`] over all client blocks of two partitions.
pub fn perturbation_magnitude_data(
    old: &PartitionedData,
    new: &PartitionedData,
) -> Result<(f64, usize)> {
    perturbation_magnitude(&old.concatenated(), &new.concatenated())
}

/// Required noise scale `c (1 + tau gamma_z n) gamma_z M |Z| / epsilon`.
pub fn noise_sigma(p: &CertParams, m: f64, z_count: usize) -> Result<f64> {
    if !(p.epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be > 0, got {}",
            p.epsilon
        )));
    }
    Ok(p.c * (1.0 + p.tau * p.gamma_z * p.n as f64) * p.gamma_z * m * z_count as f64 / p.epsilon)
}

/// Residual bound `(1 + tau gamma n) gamma_z M |Z|`.
pub fn residual_bound(p: &CertParams, m: f64, z_count: usize) -> f64 {
    (1.0 + p.tau * p.gamma * p.n as f64) * p.gamma_z * m * z_count as f64
}

/// The same bound written with `gamma_z` in the growth factor.
pub fn residual_bound_gamma_z(p: &CertParams, m: f64, z_count: usize) -> f64 {
    (1.0 + p.tau * p.gamma_z * p.n as f64) * p.gamma_z * m * z_count as f64
}

pub fn delta_from_c(c: f64) -> Result<f64> {
    if !(c >= 0.0) {
        return Err(Error::invalid(format!("c must be >= 0, got {c}")));
    }
    Ok(1.5 * (-c * c / 2.0).exp())
}

/// `|sum_z grad l(z, theta) + lambda theta + b|_2` on `corrected`.
pub fn gradient_residual(state: &FederationState, corrected: &PartitionedData) -> Result<f64> {
    state.gradient_residual(corrected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub m: f64,
    pub z_count: usize,
    /// Noise scale required for the requested guarantee.
    pub sigma: f64,
    /// Noise scale the model was actually trained with.
    pub trained_sigma: f64,
    pub residual: f64,
    pub bound: f64,
    pub bound_gamma_z: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub c: f64,
    pub tau: f64,
    pub gamma: f64,
    pub gamma_z: f64,
    pub n: usize,
    pub pass: bool,
    pub reason: Option<String>,
}

/// Assembles the certificate for `state` after unlearning from `old` to `new`.
pub fn certify(
    state: &FederationState,
    old: &PartitionedData,
    new: &PartitionedData,
    p: &CertParams,
) -> Result<CertificationReport> {
    p.validate()?;
    let (m, z_count) = perturbation_magnitude_data(old, new)?;
    let sigma = noise_sigma(p, m, z_count)?;
    let residual = gradient_residual(state, new)?;
    let bound = residual_bound(p, m, z_count);
    let trained_sigma = state.config.noise_sigma;
    let within = residual <= bound + RESIDUAL_TOLERANCE;
    let calibrated = trained_sigma >= sigma * (1.0 - 1e-12);
    let reason = match (within, calibrated) {
        (_, false) => Some(format!(
            "uncalibrated noise: trained with sigma {trained_sigma}, {sigma} required"
        )),
        (false, true) => Some(format!("residual {residual} exceeds bound {bound}")),
        (true, true) => None,
    };
    Ok(CertificationReport {
        m,
        z_count,
        sigma,
        trained_sigma,
        residual,
        bound,
        bound_gamma_z: residual_bound_gamma_z(p, m, z_count),
        epsilon: p.epsilon,
        delta: delta_from_c(p.c)?,
        c: p.c,
        tau: p.tau,
        gamma: p.gamma,
        gamma_z: p.gamma_z,
        n: p.n,
        pass: within && calibrated,
        reason,
    })
}
