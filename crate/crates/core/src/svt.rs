//! Stage 2: completion of `Q` from `W = P ⊙ Q` observed on the support of `P`
//! by singular value thresholding.
//!
//! ```text
//! Q^k = S_tau(J^{k-1})
//! J^k = J^{k-1} + delta * P_Omega(W - P ⊙ Q^k),   J^0 = 0
//! ```
//!
//! Because `|P| = 1` on `Omega`, the iteration runs on `W / P` (restricted to
//! `Omega`) and completes `Q` directly. The observed entries are also divided
//! by their RMS value, so `tau` is expressed in those units.

use nalgebra::{DVector, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{all_finite, frob2, ComplexMatrix};

/// Upper bound on the default step size.
const MAX_DEFAULT_DELTA: f64 = 1.9;

/// Tolerance on `| |P_ij| - 1 |` for entries in the support.
const UNIT_MODULUS_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SvtError {
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("SVD did not converge on a {0}x{1} matrix")]
    Svd(usize, usize),
}

/// `W` together with the phase-shift matrix whose nonzero support is `Omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedObservation {
    w_hat: ComplexMatrix,
    p: ComplexMatrix,
    omega_size: usize,
}

impl MaskedObservation {
    pub fn new(w_hat: ComplexMatrix, p: ComplexMatrix) -> Result<Self, SvtError> {
        if w_hat.shape() != p.shape() {
            return Err(SvtError::InvalidObservation(format!(
                "W is {:?} but P is {:?}",
                w_hat.shape(),
                p.shape()
            )));
        }
        if !all_finite(&w_hat) || !all_finite(&p) {
            return Err(SvtError::InvalidObservation("non-finite entries".into()));
        }
        let mut omega_size = 0;
        for z in p.iter().filter(|z| z.norm_sqr() > 0.0) {
            if (z.norm() - 1.0).abs() > UNIT_MODULUS_TOL {
                return Err(SvtError::InvalidObservation(format!(
                    "P entry {z} on the support is not unit-modulus"
                )));
            }
            omega_size += 1;
        }
        if omega_size == 0 {
            return Err(SvtError::InvalidObservation("empty support".into()));
        }
        Ok(Self {
            w_hat,
            p,
            omega_size,
        })
    }

    pub fn w_hat(&self) -> &ComplexMatrix {
        &self.w_hat
    }

    pub fn p(&self) -> &ComplexMatrix {
        &self.p
    }

    pub fn omega_size(&self) -> usize {
        self.omega_size
    }

    /// Observed fraction `|Omega| / (N L)`.
    pub fn density(&self) -> f64 {
        self.omega_size as f64 / self.p.len() as f64
    }

    fn in_omega(&self, i: usize) -> bool {
        self.p[i].norm_sqr() > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvtOptions {
    /// Threshold in units of the RMS of the observed entries; `None` means `5 sqrt(N L)`.
    pub tau: Option<f64>,
    /// Constant step size; `None` means `min(1.2 / density, 1.9)`.
    pub delta: Option<f64>,
    pub max_iters: usize,
    /// Stop once `||P_Omega(W - P ⊙ Q)||_F / ||P_Omega(W)||_F` drops below this.
    pub tol: f64,
}

impl Default for SvtOptions {
    fn default() -> Self {
        Self {
            tau: None,
            delta: None,
            max_iters: 500,
            tol: 1e-4,
        }
    }
}

impl SvtOptions {
    pub fn validate(&self) -> Result<(), SvtError> {
        let pos = |x: Option<f64>| x.is_none_or(|v| v > 0.0 && v.is_finite());
        if !pos(self.tau) || !pos(self.delta) || self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(SvtError::InvalidOptions(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvtResult {
    pub q_hat: ComplexMatrix,
    pub iters: usize,
    /// Relative feasibility residual after each iteration.
    pub feasibility_history: Vec<f64>,
    pub converged: bool,
}

/// Keeps the entries listed in `omega` and zeroes the rest. Panics on an out-of-range index.
pub fn project_omega(mx: &ComplexMatrix, omega: &[(usize, usize)]) -> ComplexMatrix {
    let mut out = ComplexMatrix::zeros(mx.nrows(), mx.ncols());
    for &(i, j) in omega {
        out[(i, j)] = mx[(i, j)];
    }
    out
}

/// `U diag((s_i - tau)_+) V^H` from a full SVD of `j`.
pub fn shrink_singular(j: &ComplexMatrix, tau: f64) -> Result<ComplexMatrix, SvtError> {
    let (r, c) = j.shape();
    if j.is_empty() {
        return Ok(j.clone());
    }
    let svd =
        SVD::try_new(j.clone(), true, true, f64::EPSILON, 10_000).ok_or(SvtError::Svd(r, c))?;
    let u = svd.u.as_ref().ok_or(SvtError::Svd(r, c))?;
    let v_t = svd.v_t.as_ref().ok_or(SvtError::Svd(r, c))?;
    let shrunk: DVector<Complex64> = svd
        .singular_values
        .map(|s| Complex64::from((s - tau).max(0.0)));
    let keep = shrunk.iter().filter(|s| s.re > 0.0).count();
    if keep == 0 {
        return Ok(ComplexMatrix::zeros(r, c));
    }
    // Singular values come sorted in decreasing order.
    let mut us = u.columns(0, keep).into_owned();
    for (k, mut col) in us.column_iter_mut().enumerate() {
        col *= shrunk[k];
    }
    Ok(us * v_t.rows(0, keep))
}

/// Runs the SVT iteration from `J^0 = 0` and returns the final `Q`
/// (or the most feasible iterate when `max_iters` is hit first).
pub fn svt_complete(obs: &MaskedObservation, opts: &SvtOptions) -> Result<SvtResult, SvtError> {
    opts.validate()?;
    let (n, l) = obs.w_hat.shape();

    // Observed values of Q on Omega, zero elsewhere.
    let mut target = ComplexMatrix::zeros(n, l);
    for i in 0..n * l {
        if obs.in_omega(i) {
            target[i] = obs.w_hat[i] / obs.p[i];
        }
    }
    let target_norm = frob2(&target).sqrt();
    if target_norm == 0.0 {
        return Ok(SvtResult {
            q_hat: ComplexMatrix::zeros(n, l),
            iters: 1,
            feasibility_history: vec![0.0],
            converged: true,
        });
    }
    let rms = target_norm / (obs.omega_size as f64).sqrt();
    let target = target / Complex64::from(rms);

    let tau = opts.tau.unwrap_or(5.0 * ((n * l) as f64).sqrt());
    let delta = opts
        .delta
        .unwrap_or((1.2 / obs.density()).min(MAX_DEFAULT_DELTA));
    let rel = (obs.omega_size as f64).sqrt();

    // While ||J||_2 <= tau the shrinkage returns zero and J grows by delta * target
    // per iteration; those iterations are applied in one step.
    let spectral = target.clone().singular_values().max();
    let idle = ((tau / (delta * spectral)).floor() as usize).min(opts.max_iters.saturating_sub(1));
    let mut j = &target * Complex64::from(idle as f64 * delta);
    let mut history = vec![1.0; idle];
    let mut best: Option<(f64, ComplexMatrix)> = None;
    let mut last = ComplexMatrix::zeros(n, l);
    let mut converged = false;
    for _ in idle..opts.max_iters {
        let q = shrink_singular(&j, tau)?;
        let mut resid = ComplexMatrix::zeros(n, l);
        for i in 0..n * l {
            if obs.in_omega(i) {
                resid[i] = target[i] - q[i];
            }
        }
        let feas = frob2(&resid).sqrt() / rel;
        history.push(feas);
        if best.as_ref().is_none_or(|(b, _)| feas < *b) {
            best = Some((feas, q.clone()));
        }
        j += resid * Complex64::from(delta);
        last = q;
        if feas < opts.tol {
            converged = true;
            break;
        }
    }
    let q = if converged {
        last
    } else {
        best.map(|(_, q)| q).unwrap_or(last)
    };
    Ok(SvtResult {
        q_hat: q * Complex64::from(rms),
        iters: history.len(),
        feasibility_history: history,
        converged,
    })
}
