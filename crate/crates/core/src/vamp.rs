//! Stage 3: joint-sparse recovery of `Theta` from `Q = Theta X` by vector AMP
//! with a column-wise MMSE denoiser, followed by activity detection.
//!
//! The iteration runs on the column-normalized signatures `A = X / sqrt(L)`
//! and the rescaled unknown `Theta' = sqrt(L) Theta`, so that `Q = Theta' A`
//! with unit-norm columns of `A` (in expectation). Column `k` of `Theta'`
//! then has per-entry prior variance `beta_k = L l_k`:
//!
//! ```text
//! U^t       = R^t A^H + Theta'^t
//! theta'_k  = eta(u_k; beta_k, rho, tau_t^2)
//! R^{t+1}   = Q - Theta'^{t+1} A + (K/L) R^t <eta'>
//! ```
//!
//! with `tau_t^2` taken from the state-evolution recursion.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{all_finite, frob2, sigmoid, ComplexMatrix};

/// Lower bound on `tau^2` relative to the mean prior variance.
const TAU2_FLOOR_REL: f64 = 1e-20;

#[derive(Debug, Error, PartialEq)]
pub enum VampError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite iterate at iteration {t} (tau2 = {tau2})")]
    NonFinite { t: usize, tau2: f64 },
}

/// Inputs of [`vamp_mmv`]; `X` is used as generated (unit-variance entries).
#[derive(Debug, Clone, PartialEq)]
pub struct VampInputs {
    pub q_hat: ComplexMatrix,
    pub x: ComplexMatrix,
    /// Per-device path loss `l_k`.
    pub pathloss: Vec<f64>,
    pub rho: f64,
    /// Noise variance per entry of `Q`.
    pub sigma2: f64,
    pub iters: usize,
}

impl VampInputs {
    pub fn validate(&self) -> Result<(), VampError> {
        let bad = |m: String| Err(VampError::InvalidInput(m));
        let (k, l) = self.x.shape();
        if self.q_hat.ncols() != l {
            return bad(format!("Q has {} columns, X has {l}", self.q_hat.ncols()));
        }
        if self.pathloss.len() != k {
            return bad(format!(
                "{} path losses for {k} devices",
                self.pathloss.len()
            ));
        }
        if self.pathloss.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad("path losses must be finite and > 0".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho = {} outside [0, 1]", self.rho));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 = {} must be finite and >= 0", self.sigma2));
        }
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if !all_finite(&self.q_hat) || !all_finite(&self.x) {
            return bad("Q or X contains NaN or Inf".into());
        }
        Ok(())
    }
}

/// Iterate after `t` rounds, in the units of `Theta` (not `Theta'`).
#[derive(Debug, Clone, PartialEq)]
pub struct VampState {
    pub theta_hat: ComplexMatrix,
    pub r: ComplexMatrix,
    /// State-evolution variance in the `Theta'` units used by the iteration.
    pub tau2: f64,
    pub t: usize,
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VampTrace {
    pub t: usize,
    pub tau2: f64,
    pub residual_norm: f64,
    pub onsager: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VampOutput {
    pub state: VampState,
    pub history: Vec<VampTrace>,
}

impl VampOutput {
    pub fn theta_hat(&self) -> &ComplexMatrix {
        &self.state.theta_hat
    }

    /// Detection threshold `c sqrt(N) tau` in `Theta` units, `tau^2` being the final
    /// state-evolution variance mapped back by `1/L`.
    pub fn threshold(&self, c: f64) -> f64 {
        let (n, _) = self.state.theta_hat.shape();
        let l = self.state.r.ncols() as f64;
        c * (n as f64).sqrt() * (self.state.tau2 / l).sqrt()
    }
}

/// MMSE denoiser of one column observed as `theta = theta_0 + CN(0, tau2 I)` where
/// `theta_0` is `0` with probability `1 - rho` and `CN(0, l_k I)` otherwise.
///
/// Returns `phi * l_k / (l_k + tau2) * theta` and the divergence of the map
/// averaged over the `2N` real coordinates.
pub fn mmse_denoise_column(
    theta: &DVector<Complex64>,
    l_k: f64,
    rho: f64,
    tau2: f64,
    n: usize,
) -> Result<(DVector<Complex64>, f64), VampError> {
    if !(tau2 > 0.0) {
        return Err(VampError::Domain(format!("tau2 must be > 0, got {tau2}")));
    }
    if !(l_k > 0.0) {
        return Err(VampError::Domain(format!("l_k must be > 0, got {l_k}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(VampError::Domain(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    if theta.len() != n {
        return Err(VampError::InvalidInput(format!(
            "column has length {}, expected {n}",
            theta.len()
        )));
    }
    let s = theta.norm_squared();
    let (gain, div) = denoise_gain(s, l_k, rho, tau2, n);
    Ok((theta * Complex64::from(gain), div))
}

/// Posterior activity probability `phi` for a column with `||theta||^2 = s`.
fn activity_prob(s: f64, l_k: f64, rho: f64, tau2: f64, n: usize) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    if rho >= 1.0 {
        return 1.0;
    }
    let nf = n as f64;
    let a = 1.0 / tau2 - 1.0 / (tau2 + l_k);
    let pi = a * s / nf;
    let psi = (l_k / tau2).ln_1p();
    sigmoid((rho / (1.0 - rho)).ln() + 0.5 * nf * (pi - psi))
}

/// Scalar gain `phi * c` and the average real-coordinate divergence.
fn denoise_gain(s: f64, l_k: f64, rho: f64, tau2: f64, n: usize) -> (f64, f64) {
    let c = l_k / (l_k + tau2);
    let phi = activity_prob(s, l_k, rho, tau2, n);
    let a = 1.0 / tau2 - 1.0 / (tau2 + l_k);
    let div = c * (phi + s * a * phi * (1.0 - phi) / (2.0 * n as f64));
    (phi * c, div)
}

/// `tau0^2 = sigma2 + (K/L) rho mean(l)`.
pub fn init_tau(sigma2: f64, k: usize, l: usize, rho: f64, pathloss: &[f64]) -> f64 {
    sigma2 + (k as f64 / l as f64) * rho * mean(pathloss.iter().copied())
}

/// `tau_{t+1}^2 = sigma2 + (K/L) rho mean(l tau_t^2 / (l + tau_t^2))`.
pub fn tau_update(tau2_t: f64, sigma2: f64, k: usize, l: usize, rho: f64, pathloss: &[f64]) -> f64 {
    let avg = if tau2_t == 0.0 {
        0.0
    } else {
        mean(pathloss.iter().map(|&p| p * tau2_t / (p + tau2_t)))
    };
    sigma2 + (k as f64 / l as f64) * rho * avg
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = it.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Runs `inputs.iters` rounds from `Theta = 0`, `R = Q`.
pub fn vamp_mmv(inputs: &VampInputs) -> Result<VampOutput, VampError> {
    inputs.validate()?;
    let (k, l) = inputs.x.shape();
    let n = inputs.q_hat.nrows();
    let sqrt_l = (l as f64).sqrt();
    let a = &inputs.x / Complex64::from(sqrt_l);
    let a_h = a.adjoint();
    let beta: Vec<f64> = inputs.pathloss.iter().map(|&p| p * l as f64).collect();
    let ratio = k as f64 / l as f64;
    let floor = TAU2_FLOOR_REL * mean(beta.iter().copied());

    let mut theta = ComplexMatrix::zeros(n, k);
    let mut r = inputs.q_hat.clone();
    let mut tau2 = init_tau(inputs.sigma2, k, l, inputs.rho, &beta).max(floor);
    let mut history = Vec::with_capacity(inputs.iters);
    for t in 1..=inputs.iters {
        let u = &r * &a_h + &theta;
        let mut div_sum = 0.0;
        for (kk, (mut out, col)) in theta.column_iter_mut().zip(u.column_iter()).enumerate() {
            let (gain, div) = denoise_gain(col.norm_squared(), beta[kk], inputs.rho, tau2, n);
            out.copy_from(&(col * Complex64::from(gain)));
            div_sum += div;
        }
        let onsager = ratio * div_sum / k as f64;
        r = &inputs.q_hat - &theta * &a + &r * Complex64::from(onsager);
        if !all_finite(&r) || !all_finite(&theta) {
            return Err(VampError::NonFinite { t, tau2 });
        }
        tau2 = tau_update(tau2, inputs.sigma2, k, l, inputs.rho, &beta).max(floor);
        history.push(VampTrace {
            t,
            tau2,
            residual_norm: frob2(&r).sqrt(),
            onsager,
        });
    }
    Ok(VampOutput {
        state: VampState {
            theta_hat: theta / Complex64::from(sqrt_l),
            r,
            tau2,
            t: inputs.iters,
        },
        history,
    })
}

/// `true` for every column whose Euclidean norm exceeds `epsilon`.
pub fn detect_activity(theta_hat: &ComplexMatrix, epsilon: f64) -> Vec<bool> {
    theta_hat
        .column_iter()
        .map(|c| c.norm() > epsilon)
        .collect()
}

/// Copies the detected columns of `theta_hat`; the others are zero.
pub fn extract_channels(theta_hat: &ComplexMatrix, activity_hat: &[bool]) -> ComplexMatrix {
    assert_eq!(
        theta_hat.ncols(),
        activity_hat.len(),
        "extract_channels: length mismatch"
    );
    let mut h = ComplexMatrix::zeros(theta_hat.nrows(), theta_hat.ncols());
    for (k, _) in activity_hat.iter().enumerate().filter(|(_, &a)| a) {
        h.set_column(k, &theta_hat.column(k));
    }
    h
}

/// Threshold minimizing the number of detection errors against `truth`,
/// with that error count. Candidates are `0` and every column norm; ties go
/// to the smallest threshold.
pub fn oracle_threshold(theta_hat: &ComplexMatrix, truth: &[bool]) -> (f64, usize) {
    assert_eq!(
        theta_hat.ncols(),
        truth.len(),
        "oracle_threshold: length mismatch"
    );
    let norms: Vec<f64> = theta_hat.column_iter().map(|c| c.norm()).collect();
    let errors = |eps: f64| {
        norms
            .iter()
            .zip(truth)
            .filter(|(&nrm, &t)| (nrm > eps) != t)
            .count()
    };
    let mut candidates = norms.clone();
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    candidates
        .into_iter()
        .map(|eps| (eps, errors(eps)))
        .min_by_key(|&(_, e)| e)
        .expect("at least one candidate")
}
