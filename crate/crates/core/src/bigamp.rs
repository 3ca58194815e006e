//! Stage 1: bilinear generalized approximate message passing (BiG-AMP).
//!
//! Factors `Y ≈ G W` with an i.i.d. complex Gaussian prior on `G` and an
//! i.i.d. Bernoulli-Gaussian prior on `W`, under the Gaussian output channel
//! `y = z + CN(0, noise_var)`. This is the sum-product (posterior mean)
//! variant with per-entry variances and adaptive damping.
//!
//! Internally the problem is rescaled so that both priors have unit variance;
//! the estimates are mapped back before returning. The assumed noise variance
//! is annealed: each attempt starts at a large value and lowers it stage by
//! stage to the true one, warm-starting every stage from the previous iterate.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::linalg::{all_finite, frob2, mean_power, sample_cn_matrix, sigmoid, ComplexMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum BigAmpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BigAmpPriors {
    /// Variance of the entries of `G`.
    pub sigma_g: f64,
    /// Probability that an entry of `W` is nonzero.
    pub lambda_w: f64,
    /// Variance of the nonzero entries of `W`.
    pub sigma_w: f64,
    /// Observation noise variance.
    pub noise_var: f64,
}

impl BigAmpPriors {
    pub fn validate(&self) -> Result<(), BigAmpError> {
        let ok = self.sigma_g > 0.0
            && self.sigma_g.is_finite()
            && self.sigma_w > 0.0
            && self.sigma_w.is_finite()
            && self.lambda_w > 0.0
            && self.lambda_w <= 1.0
            && self.noise_var >= 0.0
            && self.noise_var.is_finite();
        if ok {
            Ok(())
        } else {
            Err(BigAmpError::InvalidInput(format!(
                "invalid priors {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BigAmpOptions {
    /// Iteration cap per annealing stage.
    pub max_iters: usize,
    /// A stage ends once `||GW(t) - GW(t-1)||_F / ||GW(t)||_F` drops below this.
    pub tol: f64,
    /// Initial damping factor (weight on the new iterate, 1 = undamped).
    pub damping: f64,
    pub damping_min: f64,
    /// Extra random re-initializations tried when an attempt fails.
    pub restarts: usize,
    /// SNR (dB, relative to the mean power of `Y`) assumed by the first annealing stage.
    pub anneal_start_db: f64,
    /// SNR increment between annealing stages (dB).
    pub anneal_step_db: f64,
}

impl Default for BigAmpOptions {
    fn default() -> Self {
        Self {
            max_iters: 1500,
            tol: 1e-8,
            damping: 0.3,
            damping_min: 0.05,
            restarts: 3,
            anneal_start_db: 0.0,
            anneal_step_db: 5.0,
        }
    }
}

impl BigAmpOptions {
    pub fn validate(&self) -> Result<(), BigAmpError> {
        let ok = self.max_iters >= 1
            && self.tol > 0.0
            && self.damping > 0.0
            && self.damping <= 1.0
            && self.damping_min > 0.0
            && self.damping_min <= self.damping
            && self.anneal_start_db.is_finite()
            && self.anneal_step_db > 0.0
            && self.anneal_step_db.is_finite();
        if ok {
            Ok(())
        } else {
            Err(BigAmpError::InvalidInput(format!(
                "invalid options {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationResult {
    pub g_hat: ComplexMatrix,
    pub w_hat: ComplexMatrix,
    /// Iterations of the returned attempt, summed over annealing stages.
    pub iters_used: usize,
    /// Best-so-far residual `||Y - G W||_F` after each iteration of the returned attempt.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Number of attempts run (1 + restarts actually used).
    pub attempts: usize,
}

/// Posterior mean and variance of `w` with the Bernoulli-Gaussian prior
/// `(1-lambda_w) delta(w) + lambda_w CN(w; 0, sigma_w)`, observed as
/// `r = w + CN(0, v)`.
pub fn posterior_w_entry(
    r: Complex64,
    v: f64,
    priors: &BigAmpPriors,
) -> Result<(Complex64, f64), BigAmpError> {
    if !(v > 0.0) {
        return Err(BigAmpError::Domain(format!(
            "pseudo-variance must be > 0, got {v}"
        )));
    }
    Ok(bg_denoise(r, v, priors.lambda_w, priors.sigma_w))
}

/// Conjugate update for the Gaussian prior `CN(0, sigma_g)` observed as `r = g + CN(0, v)`.
pub fn posterior_g_entry(
    r: Complex64,
    v: f64,
    sigma_g: f64,
) -> Result<(Complex64, f64), BigAmpError> {
    if !(v > 0.0) {
        return Err(BigAmpError::Domain(format!(
            "pseudo-variance must be > 0, got {v}"
        )));
    }
    Ok(gauss_denoise(r, v, sigma_g))
}

#[inline]
fn gauss_denoise(r: Complex64, v: f64, sigma: f64) -> (Complex64, f64) {
    let gain = sigma / (sigma + v);
    (r * gain, sigma * v / (sigma + v))
}

#[inline]
fn bg_denoise(r: Complex64, v: f64, lambda: f64, sigma: f64) -> (Complex64, f64) {
    let gain = sigma / (sigma + v);
    let g = r * gain;
    let gamma = sigma * v / (sigma + v);
    let pi = if lambda >= 1.0 {
        1.0
    } else {
        // log-odds of "nonzero" vs "zero" given r
        let llr = (lambda / (1.0 - lambda)).ln()
            + (v / (sigma + v)).ln()
            + r.norm_sqr() * (1.0 / v - 1.0 / (sigma + v));
        sigmoid(llr)
    };
    let mean = g * pi;
    let var = pi * gamma + pi * (1.0 - pi) * g.norm_sqr();
    (mean, var)
}

type RealMatrix = DMatrix<f64>;

fn abs2(m: &ComplexMatrix) -> RealMatrix {
    m.map(|z| z.norm_sqr())
}

fn mix(new: &ComplexMatrix, old: &ComplexMatrix, beta: f64) -> ComplexMatrix {
    new.zip_map(old, |a, b| a * beta + b * (1.0 - beta))
}

fn mix_real(new: &RealMatrix, old: &RealMatrix, beta: f64) -> RealMatrix {
    new.zip_map(old, |a, b| beta * a + (1.0 - beta) * b)
}

/// Iterate of one BiG-AMP attempt, in the unit-prior scaling.
#[derive(Clone)]
struct State {
    g: ComplexMatrix,
    nu_g: RealMatrix,
    w: ComplexMatrix,
    nu_w: RealMatrix,
    g_bar: ComplexMatrix,
    w_bar: ComplexMatrix,
    s: ComplexMatrix,
    nu_s: RealMatrix,
    nu_p_bar: RealMatrix,
    nu_p: RealMatrix,
    z: ComplexMatrix,
    residual: f64,
    first: bool,
}

impl State {
    fn init(y: &ComplexMatrix, g: ComplexMatrix, inner_dim: usize, lambda: f64) -> Self {
        let (m, l) = y.shape();
        let n = inner_dim;
        Self {
            g_bar: g.clone(),
            g,
            nu_g: RealMatrix::from_element(m, n, 1.0),
            w_bar: ComplexMatrix::zeros(n, l),
            w: ComplexMatrix::zeros(n, l),
            nu_w: RealMatrix::from_element(n, l, lambda),
            s: ComplexMatrix::zeros(m, l),
            nu_s: RealMatrix::zeros(m, l),
            nu_p_bar: RealMatrix::zeros(m, l),
            nu_p: RealMatrix::zeros(m, l),
            z: ComplexMatrix::zeros(m, l),
            residual: frob2(y).sqrt(),
            first: true,
        }
    }

    fn is_finite(&self) -> bool {
        self.residual.is_finite() && all_finite(&self.g) && all_finite(&self.w)
    }
}

/// One damped BiG-AMP step from `st` with damping weight `beta` under noise variance `noise`.
fn step(y: &ComplexMatrix, st: &State, beta: f64, lambda: f64, noise: f64) -> State {
    let (m, n) = st.g.shape();
    let l = st.w.ncols();

    // Forward pass: pseudo-observation variances of Z with damping.
    let g2 = abs2(&st.g);
    let w2 = abs2(&st.w);
    let mut nu_p_bar = &g2 * &st.nu_w + &st.nu_g * &w2;
    let mut nu_p = &nu_p_bar + &st.nu_g * &st.nu_w;
    if !st.first {
        nu_p_bar = mix_real(&nu_p_bar, &st.nu_p_bar, beta);
        nu_p = mix_real(&nu_p, &st.nu_p, beta);
    }

    // Onsager-corrected plug-in estimate of Z and the Gaussian output channel.
    let mut s = ComplexMatrix::zeros(m, l);
    let mut nu_s = RealMatrix::zeros(m, l);
    for i in 0..m * l {
        let p_hat = st.z[i] - st.s[i] * nu_p_bar[i];
        let d = nu_p[i] + noise;
        s[i] = (y[i] - p_hat) / d;
        nu_s[i] = 1.0 / d;
    }
    let (s, nu_s, g_bar, w_bar) = if st.first {
        (s, nu_s, st.g.clone(), st.w.clone())
    } else {
        (
            mix(&s, &st.s, beta),
            mix_real(&nu_s, &st.nu_s, beta),
            mix(&st.g, &st.g_bar, beta),
            mix(&st.w, &st.w_bar, beta),
        )
    };

    // Pseudo-observations of W and the Bernoulli-Gaussian denoiser.
    let nu_r = (abs2(&g_bar).transpose() * &nu_s).map(|x| 1.0 / x);
    let corr_r = st.nu_g.transpose() * &nu_s;
    let back_r = g_bar.adjoint() * &s;
    let mut w = ComplexMatrix::zeros(n, l);
    let mut nu_w = RealMatrix::zeros(n, l);
    for i in 0..n * l {
        let gain = (1.0 - nu_r[i] * corr_r[i]).clamp(0.0, 1.0);
        let r = w_bar[i] * gain + back_r[i] * nu_r[i];
        let (mean, var) = bg_denoise(r, nu_r[i], lambda, 1.0);
        w[i] = mean;
        nu_w[i] = var;
    }

    // Pseudo-observations of G; skipped while W carries no information.
    let (g, nu_g) = if w_bar.iter().any(|z| z.norm_sqr() > 0.0) {
        let nu_q = (&nu_s * abs2(&w_bar).transpose()).map(|x| 1.0 / x);
        let corr_q = &nu_s * st.nu_w.transpose();
        let back_q = &s * w_bar.adjoint();
        let mut g = ComplexMatrix::zeros(m, n);
        let mut nu_g = RealMatrix::zeros(m, n);
        for i in 0..m * n {
            let gain = (1.0 - nu_q[i] * corr_q[i]).clamp(0.0, 1.0);
            let q = g_bar[i] * gain + back_q[i] * nu_q[i];
            let (mean, var) = gauss_denoise(q, nu_q[i], 1.0);
            g[i] = mean;
            nu_g[i] = var;
        }
        (g, nu_g)
    } else {
        (st.g.clone(), st.nu_g.clone())
    };

    let z = &g * &w;
    let residual = frob2(&(y - &z)).sqrt();
    State {
        g,
        nu_g,
        w,
        nu_w,
        g_bar,
        w_bar,
        s,
        nu_s,
        nu_p_bar,
        nu_p,
        z,
        residual,
        first: false,
    }
}

struct Problem<'a> {
    y: &'a ComplexMatrix,
    inner_dim: usize,
    lambda: f64,
    /// Mean power of `y`.
    power: f64,
    /// Noise variance of the last annealing stage.
    noise: f64,
}

impl Problem<'_> {
    /// Noise variances of the annealing stages, ending at the target.
    fn schedule(&self, opts: &BigAmpOptions) -> Vec<f64> {
        let mut out = Vec::new();
        let mut snr = opts.anneal_start_db;
        loop {
            let v = self.power * 10f64.powf(-snr / 10.0);
            if v <= self.noise {
                out.push(self.noise);
                return out;
            }
            out.push(v);
            snr += opts.anneal_step_db;
        }
    }
}

struct Attempt {
    state: State,
    iters: usize,
    history: Vec<f64>,
    stopped: bool,
}

fn run_attempt<R: Rng + ?Sized>(prob: &Problem<'_>, opts: &BigAmpOptions, rng: &mut R) -> Attempt {
    let (m, _) = prob.y.shape();
    let g0 = sample_cn_matrix(rng, m, prob.inner_dim, 1.0);
    let mut st = State::init(prob.y, g0, prob.inner_dim, prob.lambda);
    let mut best = st.residual;
    let mut best_state = st.clone();
    let mut history = Vec::new();
    let mut iters = 0;
    let mut stopped = false;
    let schedule = prob.schedule(opts);
    let last = schedule.len() - 1;
    'stages: for (k, &noise) in schedule.iter().enumerate() {
        let mut beta = opts.damping;
        for _ in 0..opts.max_iters {
            iters += 1;
            let cand = step(prob.y, &st, beta, prob.lambda, noise);
            if !cand.is_finite() {
                history.push(best);
                break 'stages;
            }
            beta = if cand.residual > st.residual && !st.first {
                (beta * 0.5).max(opts.damping_min)
            } else {
                opts.damping
            };
            let z_norm = frob2(&cand.z).sqrt();
            let change = frob2(&(&cand.z - &st.z)).sqrt();
            st = cand;
            if st.residual < best {
                best = st.residual;
                best_state = st.clone();
            }
            history.push(best);
            if z_norm > 0.0 && change <= opts.tol * z_norm {
                stopped = k == last;
                break;
            }
        }
    }
    let state = if stopped { st } else { best_state };
    Attempt {
        state,
        iters,
        history,
        stopped,
    }
}

/// Relative noise floor applied to the output channel so the noiseless
/// problem stays well conditioned.
const NOISE_FLOOR_REL: f64 = 1e-10;

/// Residual energy accepted at a fixed point, in units of the expected noise energy.
const RESIDUAL_SLACK: f64 = 4.0;

/// Factors `y` (`M x L`) into a dense `G` (`M x inner_dim`) and a sparse `W`
/// (`inner_dim x L`).
///
/// `G` is drawn from its prior with `rng` at the start of every attempt and
/// `W` starts at zero mean with prior variance. An attempt succeeds when the
/// change criterion fires in the final annealing stage and the residual is
/// consistent with the noise level; otherwise up to `opts.restarts` fresh
/// attempts are made and the one with the smallest residual is returned with
/// `converged = false`.
pub fn bigamp_factorize<R: Rng + ?Sized>(
    y: &ComplexMatrix,
    inner_dim: usize,
    priors: &BigAmpPriors,
    opts: &BigAmpOptions,
    rng: &mut R,
) -> Result<FactorizationResult, BigAmpError> {
    priors.validate()?;
    opts.validate()?;
    if inner_dim == 0 {
        return Err(BigAmpError::InvalidInput(
            "inner dimension must be >= 1".into(),
        ));
    }
    if !all_finite(y) {
        return Err(BigAmpError::InvalidInput(
            "observation contains NaN or Inf".into(),
        ));
    }
    let (m, l) = y.shape();
    let g_scale = priors.sigma_g.sqrt();
    let w_scale = priors.sigma_w.sqrt();
    let scale = g_scale * w_scale;

    if frob2(y) == 0.0 {
        let g = sample_cn_matrix(rng, m, inner_dim, priors.sigma_g);
        return Ok(FactorizationResult {
            g_hat: g,
            w_hat: ComplexMatrix::zeros(inner_dim, l),
            iters_used: 0,
            residual_history: Vec::new(),
            converged: true,
            attempts: 1,
        });
    }

    let y_n = y / Complex64::from(scale);
    let power = mean_power(&y_n);
    let noise = (priors.noise_var / (scale * scale)).max(NOISE_FLOOR_REL * power);
    let prob = Problem {
        y: &y_n,
        inner_dim,
        lambda: priors.lambda_w,
        power,
        noise,
    };
    let accept = (RESIDUAL_SLACK * noise * (m * l) as f64).sqrt();

    let mut best: Option<Attempt> = None;
    let mut attempts = 0;
    for _ in 0..=opts.restarts {
        attempts += 1;
        let a = run_attempt(&prob, opts, rng);
        let ok = a.stopped && a.state.residual <= accept;
        let better = best
            .as_ref()
            .is_none_or(|b| a.state.residual < b.state.residual);
        if ok || better {
            best = Some(a);
        }
        if ok {
            break;
        }
    }
    let a = best.expect("at least one attempt");
    let converged = a.stopped && a.state.residual <= accept;
    Ok(FactorizationResult {
        g_hat: a.state.g * Complex64::from(g_scale),
        w_hat: a.state.w * Complex64::from(w_scale),
        iters_used: a.iters,
        residual_history: a.history.into_iter().map(|r| r * scale).collect(),
        converged,
        attempts,
    })
}
