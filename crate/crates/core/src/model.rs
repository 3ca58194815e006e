//! Synthetic IRS-assisted uplink: configuration, path loss and scene generation.
//!
//! A scene is one coherence block: the IRS-to-BS channel `G`, the device-to-IRS
//! channels `H`, the activity pattern, the signature matrix `X`, the IRS
//! phase-shift matrix `P` and the received signal
//!
//! ```text
//! Y = G (P ⊙ (H diag(activity) X)) + noise
//! ```
//!
//! together with the derived `Theta = H diag(activity)`, `Q = Theta X` and
//! `W = P ⊙ Q`, so that `Y = G W + noise`.
//!
//! # Random stream
//!
//! [`sample_scene`] consumes its generator in a fixed order:
//!
//! 1. `G`, row-major, `M*N` complex normals;
//! 2. the `K` device distances, then `H` column by column (device-major);
//! 3. `K` activity uniforms;
//! 4. `X`, row-major;
//! 5. `P`, slot-major (`l` outer, element `n` inner), one uniform for the
//!    on/off state followed by one uniform for the phase, drawn for every entry;
//! 6. the noise, row-major, drawn even when `sigma == 0`.
//!
//! Everything that does not depend on `L` (channels, distances, activity) is
//! drawn first, so sweeping the pilot length with a fixed seed keeps the
//! same devices and channels.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{hadamard, sample_cn, sample_cn_matrix, ComplexMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Scenario parameters for one experiment point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// BS antennas (M).
    pub antennas: usize,
    /// IRS reflecting elements (N).
    pub irs_elements: usize,
    /// Potential devices (K).
    pub devices: usize,
    /// Signature length in symbols (L).
    pub pilot_len: usize,
    /// Per-device activity probability.
    pub rho: f64,
    /// Density of "on" IRS elements in the phase-shift matrix.
    pub lambda: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Path loss at the reference distance, linear scale.
    pub pathloss_l0: f64,
    /// Reference distance in meters.
    pub pathloss_d0: f64,
    pub alpha_device_irs: f64,
    pub alpha_irs_bs: f64,
    /// IRS-to-BS distance in meters.
    pub d_irs_bs: f64,
    /// Device-to-IRS distances are uniform on this interval (meters).
    pub d_device_range: [f64; 2],
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            antennas: 30,
            irs_elements: 15,
            devices: 200,
            pilot_len: 100,
            rho: 0.05,
            lambda: 0.5,
            sigma: 0.0,
            pathloss_l0: 1e-3,
            pathloss_d0: 1.0,
            alpha_device_irs: 2.0,
            alpha_irs_bs: 2.8,
            d_irs_bs: 100.0,
            d_device_range: [500.0, 1000.0],
            seed: 0,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.antennas == 0 || self.irs_elements == 0 || self.devices == 0 || self.pilot_len == 0
        {
            return bad("antennas, irs_elements, devices and pilot_len must all be >= 1");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda must lie in (0, 1]");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and >= 0");
        }
        let positive = [
            ("pathloss_l0", self.pathloss_l0),
            ("pathloss_d0", self.pathloss_d0),
            ("d_irs_bs", self.d_irs_bs),
            ("d_device_range[0]", self.d_device_range[0]),
            ("d_device_range[1]", self.d_device_range[1]),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be finite and > 0"
                )));
            }
        }
        if !(self.alpha_device_irs.is_finite() && self.alpha_irs_bs.is_finite()) {
            return bad("path-loss exponents must be finite");
        }
        if self.d_device_range[0] > self.d_device_range[1] {
            return bad("d_device_range must satisfy d_min <= d_max");
        }
        Ok(())
    }

    /// SNR in dB, defined as `10 log10(1/sigma)`.
    pub fn snr_db(&self) -> f64 {
        10.0 * (1.0 / self.sigma).log10()
    }

    /// Sets `sigma` from an SNR in dB (inverse of [`SystemConfig::snr_db`]).
    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.sigma = sigma_from_snr_db(snr_db);
        self
    }

    /// Path loss of the IRS-to-BS link (variance of the entries of `G`).
    pub fn pathloss_irs_bs(&self) -> Result<f64, ModelError> {
        path_loss(
            self.d_irs_bs,
            self.pathloss_l0,
            self.pathloss_d0,
            self.alpha_irs_bs,
        )
    }
}

pub fn sigma_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Distance-based path loss `l0 * (d/d0)^(-alpha)`.
pub fn path_loss(d: f64, l0: f64, d0: f64, alpha: f64) -> Result<f64, ModelError> {
    if !(d > 0.0) || !(d0 > 0.0) || !(l0 > 0.0) {
        return Err(ModelError::Domain(format!(
            "path_loss needs positive d, d0, l0 (got d={d}, d0={d0}, l0={l0})"
        )));
    }
    Ok(l0 * (d / d0).powf(-alpha))
}

/// One draw of the ground truth and the received signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRealization {
    pub seed: u64,
    /// IRS to BS channel, `M x N`.
    pub g: ComplexMatrix,
    /// Device to IRS channels, `N x K`.
    pub h: ComplexMatrix,
    pub activity: Vec<bool>,
    /// Signatures, `K x L`.
    pub x: ComplexMatrix,
    /// Phase shifts, `N x L`; off elements are stored as exact zeros.
    pub p: ComplexMatrix,
    pub noise: ComplexMatrix,
    /// Received signal, `M x L`.
    pub y: ComplexMatrix,
    pub device_distances: Vec<f64>,
    /// Per-device path loss `l_k`.
    pub pathloss_devices: Vec<f64>,
    /// Path loss of the IRS-to-BS link `l_R`.
    pub pathloss_irs_bs: f64,
    /// `H diag(activity)`, `N x K`.
    pub theta: ComplexMatrix,
    /// `Theta X`, `N x L`.
    pub q: ComplexMatrix,
    /// `P ⊙ Q`, `N x L`.
    pub w: ComplexMatrix,
}

impl SceneRealization {
    pub fn active_indices(&self) -> Vec<usize> {
        self.activity
            .iter()
            .enumerate()
            .filter_map(|(k, &a)| a.then_some(k))
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.activity.iter().filter(|&&a| a).count()
    }
}

/// The generator used for scene draws: ChaCha8 seeded from `seed`, stream 0.
pub fn scene_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a full scene. See the module docs for the order in which `rng` is consumed.
pub fn sample_scene<R: Rng + ?Sized>(
    config: &SystemConfig,
    rng: &mut R,
) -> Result<SceneRealization, ModelError> {
    config.validate()?;
    let (m, n, k, l) = (
        config.antennas,
        config.irs_elements,
        config.devices,
        config.pilot_len,
    );

    let l_r = config.pathloss_irs_bs()?;
    let g = sample_cn_matrix(rng, m, n, l_r);

    let [d_min, d_max] = config.d_device_range;
    let device_distances: Vec<f64> = (0..k)
        .map(|_| d_min + (d_max - d_min) * rng.random::<f64>())
        .collect();
    let pathloss_devices = device_distances
        .iter()
        .map(|&d| {
            path_loss(
                d,
                config.pathloss_l0,
                config.pathloss_d0,
                config.alpha_device_irs,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut h = ComplexMatrix::zeros(n, k);
    for (kk, &lk) in pathloss_devices.iter().enumerate() {
        for nn in 0..n {
            h[(nn, kk)] = sample_cn(rng, lk);
        }
    }

    let activity: Vec<bool> = (0..k).map(|_| rng.random::<f64>() < config.rho).collect();
    let x = sample_cn_matrix(rng, k, l, 1.0);

    let mut p = ComplexMatrix::zeros(n, l);
    for ll in 0..l {
        for nn in 0..n {
            let on = rng.random::<f64>() < config.lambda;
            // (0, 2pi]
            let phase = 2.0 * PI * (1.0 - rng.random::<f64>());
            if on {
                p[(nn, ll)] = Complex64::from_polar(1.0, phase);
            }
        }
    }

    let noise = sample_cn_matrix(rng, m, l, config.sigma * config.sigma);

    let theta = activity_mask(&h, &activity);
    let q = &theta * &x;
    let w = hadamard(&p, &q);
    let y = &g * &w + &noise;

    Ok(SceneRealization {
        seed: 0,
        g,
        h,
        activity,
        x,
        p,
        noise,
        y,
        device_distances,
        pathloss_devices,
        pathloss_irs_bs: l_r,
        theta,
        q,
        w,
    })
}

/// Convenience wrapper: [`sample_scene`] with [`scene_rng`]`(seed)`.
pub fn generate_scene(config: &SystemConfig, seed: u64) -> Result<SceneRealization, ModelError> {
    let mut rng = scene_rng(seed);
    let mut scene = sample_scene(config, &mut rng)?;
    scene.seed = seed;
    Ok(scene)
}

fn activity_mask(h: &ComplexMatrix, activity: &[bool]) -> ComplexMatrix {
    let mut theta = h.clone();
    for (k, &a) in activity.iter().enumerate() {
        if !a {
            theta.column_mut(k).fill(Complex64::new(0.0, 0.0));
        }
    }
    theta
}

/// Assembles `G (P ⊙ (H diag(activity) X)) + noise`.
pub fn synthesize_received(
    g: &ComplexMatrix,
    h: &ComplexMatrix,
    activity: &[bool],
    x: &ComplexMatrix,
    p: &ComplexMatrix,
    noise: &ComplexMatrix,
) -> Result<ComplexMatrix, ModelError> {
    let (m, n) = g.shape();
    let k = h.ncols();
    let l = x.ncols();
    let checks = [
        ("H rows vs G cols", h.nrows(), n),
        ("activity len vs H cols", activity.len(), k),
        ("X rows vs H cols", x.nrows(), k),
        ("P rows vs N", p.nrows(), n),
        ("P cols vs L", p.ncols(), l),
        ("noise rows vs M", noise.nrows(), m),
        ("noise cols vs L", noise.ncols(), l),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(ModelError::DimensionMismatch(format!(
                "{what}: {got} != {want}"
            )));
        }
    }
    let theta = activity_mask(h, activity);
    Ok(g * hadamard(p, &(theta * x)) + noise)
}
