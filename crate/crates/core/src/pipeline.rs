//! End-to-end trial: scene generation, the three estimation stages and all
//! evaluation metrics.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bigamp::{bigamp_factorize, BigAmpError, BigAmpOptions, BigAmpPriors};
use crate::disambig::{resolve_ambiguity, AmbiguityFix, DisambigError};
use crate::linalg::{frob2, mean_power, ComplexMatrix};
use crate::model::{generate_scene, ModelError, SceneRealization, SystemConfig};
use crate::svt::{svt_complete, MaskedObservation, SvtError, SvtOptions};
use crate::vamp::{
    detect_activity, extract_channels, oracle_threshold, vamp_mmv, VampError, VampInputs,
};

/// Floor reported for an exact estimate, in dB.
pub const NMSE_FLOOR_DB: f64 = -200.0;

/// `NMSE(H)` below this counts as a successful recovery.
pub const SUCCESS_NMSE_DB: f64 = -50.0;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stage 1: {0}")]
    BigAmp(#[from] BigAmpError),
    #[error("disambiguation: {0}")]
    Disambig(#[from] DisambigError),
    #[error("stage 2: {0}")]
    Svt(#[from] SvtError),
    #[error("stage 3: {0}")]
    Vamp(#[from] VampError),
    #[error("NMSE undefined: reference has zero energy")]
    ZeroReference,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Options of stage 3 and the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VampOptions {
    pub iters: usize,
    /// Detection threshold is `threshold_scale * sqrt(N) * tau`.
    pub threshold_scale: f64,
    /// Added to the noise proxy, relative to the mean power of the completed `Q`.
    pub sigma2_floor_rel: f64,
}

impl Default for VampOptions {
    fn default() -> Self {
        Self {
            iters: 50,
            threshold_scale: 3.0,
            sigma2_floor_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub bigamp: BigAmpOptions,
    pub svt: SvtOptions,
    pub vamp: VampOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub bigamp_iters: usize,
    pub bigamp_attempts: usize,
    pub bigamp_converged: bool,
    /// Relative residual `||Y - G W||_F / ||Y||_F` of stage 1.
    pub bigamp_rel_residual: f64,
    pub ambiguity_zero_columns: usize,
    pub svt_iters: usize,
    pub svt_converged: bool,
    pub svt_feasibility: f64,
    /// Final state-evolution variance of stage 3 (internal units).
    pub vamp_tau2: f64,
    pub threshold: f64,
    pub oracle_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageEstimates {
    /// Stage 1 after disambiguation.
    pub g_hat: ComplexMatrix,
    pub w_hat: ComplexMatrix,
    pub ambiguity: AmbiguityFix,
    pub q_hat: ComplexMatrix,
    pub theta_hat: ComplexMatrix,
    pub activity_hat: Vec<bool>,
    pub h_hat: ComplexMatrix,
    pub diagnostics: StageDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub bigamp_ms: f64,
    pub svt_ms: f64,
    pub vamp_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub nmse_g_db: f64,
    /// `None` when the true `W` is zero.
    pub nmse_w_db: Option<f64>,
    /// `None` when the true `Q` is zero.
    pub nmse_q_db: Option<f64>,
    /// On the truly active columns; `None` when no device is active.
    pub nmse_h_db: Option<f64>,
    pub activity_error_rate: f64,
    pub false_alarms: usize,
    pub misses: usize,
    /// Error rate with the threshold chosen against the true activity.
    pub oracle_error_rate: f64,
    pub active_devices: usize,
    pub success_h: bool,
    /// All three stages met their stopping criteria.
    pub converged: bool,
    pub runtime: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutput {
    pub scene: SceneRealization,
    pub estimates: StageEstimates,
    pub metrics: TrialMetrics,
}

/// `10 log10(||est - truth||^2 / ||truth||^2)`, optionally over a subset of
/// columns, floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db(
    est: &ComplexMatrix,
    truth: &ComplexMatrix,
    restrict: Option<&[usize]>,
) -> Result<f64, PipelineError> {
    if est.shape() != truth.shape() {
        return Err(PipelineError::DimensionMismatch(format!(
            "estimate {:?} vs truth {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let (err, energy) = match restrict {
        None => (frob2(&(est - truth)), frob2(truth)),
        Some(cols) => cols.iter().fold((0.0, 0.0), |(e, t), &k| {
            (
                e + (est.column(k) - truth.column(k)).norm_squared(),
                t + truth.column(k).norm_squared(),
            )
        }),
    };
    if energy == 0.0 {
        return Err(PipelineError::ZeroReference);
    }
    Ok((10.0 * (err / energy).log10()).max(NMSE_FLOOR_DB))
}

/// Hamming distance between the two activity patterns divided by their length.
pub fn activity_error_rate(activity_hat: &[bool], activity_true: &[bool]) -> f64 {
    assert_eq!(
        activity_hat.len(),
        activity_true.len(),
        "activity length mismatch"
    );
    if activity_true.is_empty() {
        return 0.0;
    }
    let wrong = activity_hat
        .iter()
        .zip(activity_true)
        .filter(|(a, b)| a != b)
        .count();
    wrong as f64 / activity_true.len() as f64
}

/// Stage-1 priors wired from the generative model.
///
/// `sigma_w` is the variance of an entry of `Q`, `rho * sum_k l_k`; the activity
/// probability is floored at `1/K`.
pub fn bigamp_priors(config: &SystemConfig, scene: &SceneRealization) -> BigAmpPriors {
    let rho = config.rho.max(1.0 / config.devices as f64);
    BigAmpPriors {
        sigma_g: scene.pathloss_irs_bs,
        lambda_w: config.lambda,
        sigma_w: rho * scene.pathloss_devices.iter().sum::<f64>(),
        noise_var: config.sigma * config.sigma,
    }
}

/// Generator for the stage-1 initializations: same seed as the scene, stream 1.
pub fn solver_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn optional_nmse(
    est: &ComplexMatrix,
    truth: &ComplexMatrix,
    cols: Option<&[usize]>,
) -> Result<Option<f64>, PipelineError> {
    match nmse_db(est, truth, cols) {
        Ok(v) => Ok(Some(v)),
        Err(PipelineError::ZeroReference) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs one trial for `config` with `seed`.
pub fn run_pipeline(
    config: &SystemConfig,
    seed: u64,
    opts: &PipelineOptions,
) -> Result<TrialOutput, PipelineError> {
    let scene = generate_scene(config, seed)?;
    let (m, n) = scene.g.shape();

    let t0 = Instant::now();
    let priors = bigamp_priors(config, &scene);
    let fact = bigamp_factorize(&scene.y, n, &priors, &opts.bigamp, &mut solver_rng(seed))?;
    let (g_hat, w_hat, ambiguity) =
        resolve_ambiguity(&fact.g_hat, &fact.w_hat, &scene.g, &scene.w)?;
    let y_norm = frob2(&scene.y).sqrt();
    let bigamp_rel_residual = if y_norm > 0.0 {
        frob2(&(&scene.y - &g_hat * &w_hat)).sqrt() / y_norm
    } else {
        0.0
    };
    let bigamp_ms = ms_since(t0);

    let t1 = Instant::now();
    let obs = MaskedObservation::new(w_hat.clone(), scene.p.clone())?;
    let completion = svt_complete(&obs, &opts.svt)?;
    let svt_ms = ms_since(t1);

    let t2 = Instant::now();
    // noise seen on W after inverting G, plus a floor relative to the signal
    let sigma2 = config.sigma * config.sigma / (m as f64 * scene.pathloss_irs_bs)
        + opts.vamp.sigma2_floor_rel * mean_power(&completion.q_hat);
    let vamp = vamp_mmv(&VampInputs {
        q_hat: completion.q_hat.clone(),
        x: scene.x.clone(),
        pathloss: scene.pathloss_devices.clone(),
        rho: config.rho,
        sigma2,
        iters: opts.vamp.iters,
    })?;
    let threshold = vamp.threshold(opts.vamp.threshold_scale);
    let theta_hat = vamp.state.theta_hat.clone();
    let activity_hat = detect_activity(&theta_hat, threshold);
    let h_hat = extract_channels(&theta_hat, &activity_hat);
    let vamp_ms = ms_since(t2);

    let active = scene.active_indices();
    let nmse_h_db = if active.is_empty() {
        None
    } else {
        Some(nmse_db(&h_hat, &scene.h, Some(&active))?)
    };
    let (oracle_eps, oracle_errors) = oracle_threshold(&theta_hat, &scene.activity);
    let false_alarms = activity_hat
        .iter()
        .zip(&scene.activity)
        .filter(|(&a, &t)| a && !t)
        .count();
    let misses = activity_hat
        .iter()
        .zip(&scene.activity)
        .filter(|(&a, &t)| !a && t)
        .count();
    let metrics = TrialMetrics {
        nmse_g_db: nmse_db(&g_hat, &scene.g, None)?,
        nmse_w_db: optional_nmse(&w_hat, &scene.w, None)?,
        nmse_q_db: optional_nmse(&completion.q_hat, &scene.q, None)?,
        nmse_h_db,
        activity_error_rate: activity_error_rate(&activity_hat, &scene.activity),
        false_alarms,
        misses,
        oracle_error_rate: oracle_errors as f64 / config.devices as f64,
        active_devices: active.len(),
        success_h: nmse_h_db.is_some_and(|v| v < SUCCESS_NMSE_DB),
        converged: fact.converged && completion.converged,
        runtime: StageTimings {
            bigamp_ms,
            svt_ms,
            vamp_ms,
        },
    };
    let estimates = StageEstimates {
        diagnostics: StageDiagnostics {
            bigamp_iters: fact.iters_used,
            bigamp_attempts: fact.attempts,
            bigamp_converged: fact.converged,
            bigamp_rel_residual,
            ambiguity_zero_columns: ambiguity.zero_columns.len(),
            svt_iters: completion.iters,
            svt_converged: completion.converged,
            svt_feasibility: completion
                .feasibility_history
                .last()
                .copied()
                .unwrap_or(0.0),
            vamp_tau2: vamp.state.tau2,
            threshold,
            oracle_threshold: oracle_eps,
        },
        g_hat,
        w_hat,
        ambiguity,
        q_hat: completion.q_hat,
        theta_hat,
        activity_hat,
        h_hat,
    };
    Ok(TrialOutput {
        scene,
        estimates,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_cn_matrix;
    use num_complex::Complex64;

    fn zeros(r: usize, c: usize) -> ComplexMatrix {
        ComplexMatrix::zeros(r, c)
    }

    #[test]
    fn nmse_examples() {
        let mut rng = solver_rng(1);
        let t = sample_cn_matrix(&mut rng, 5, 6, 1.0);
        assert_eq!(nmse_db(&t, &t, None).unwrap(), NMSE_FLOOR_DB);
        assert!(nmse_db(&zeros(5, 6), &t, None).unwrap().abs() < 1e-12);
        let est = &t + &t * Complex64::from(0.01);
        assert!((nmse_db(&est, &t, None).unwrap() + 40.0).abs() < 1e-9);
        assert_eq!(
            nmse_db(&t, &zeros(5, 6), None),
            Err(PipelineError::ZeroReference)
        );
        let mut e2 = t.clone();
        e2.column_mut(0).fill(Complex64::new(9.0, 0.0));
        assert_eq!(nmse_db(&e2, &t, Some(&[1, 2])).unwrap(), NMSE_FLOOR_DB);
        assert_eq!(
            nmse_db(&e2, &t, Some(&[])),
            Err(PipelineError::ZeroReference)
        );
    }

    #[test]
    fn error_rate_examples() {
        let a = vec![true, false, true, true];
        assert_eq!(activity_error_rate(&a, &a), 0.0);
        let inv: Vec<bool> = a.iter().map(|x| !x).collect();
        assert_eq!(activity_error_rate(&a, &inv), 1.0);
        let mut t = vec![false; 200];
        let mut h = t.clone();
        h[17] = true;
        assert_eq!(activity_error_rate(&h, &t), 0.005);
        t[17] = true;
        assert_eq!(activity_error_rate(&h, &t), 0.0);
    }

    #[test]
    fn silent_network_gives_zero_estimates() {
        let cfg = SystemConfig {
            rho: 0.0,
            sigma: 0.0,
            ..SystemConfig::default()
        };
        let out = run_pipeline(&cfg, 3, &PipelineOptions::default()).unwrap();
        assert_eq!(out.estimates.theta_hat, zeros(15, 200));
        assert_eq!(out.estimates.h_hat, zeros(15, 200));
        assert_eq!(out.metrics.activity_error_rate, 0.0);
        assert_eq!(out.metrics.nmse_h_db, None);
        assert!(!out.metrics.success_h);
    }

    #[test]
    fn trials_are_deterministic() {
        let cfg = SystemConfig {
            pilot_len: 40,
            ..SystemConfig::default()
        }
        .with_snr_db(40.0);
        let opts = PipelineOptions::default();
        let a = run_pipeline(&cfg, 9, &opts).unwrap();
        let b = run_pipeline(&cfg, 9, &opts).unwrap();
        assert_eq!(a.estimates, b.estimates);
        let strip = |m: &TrialMetrics| TrialMetrics {
            runtime: StageTimings::default(),
            ..m.clone()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
    }
}
