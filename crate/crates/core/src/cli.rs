//! Monte-Carlo experiment runner behind the `irs-sim` binary.
//!
//! An experiment file (TOML) names the experiment kind, the base scenario,
//! the sweep over signature length and SNR, and optional solver settings.
//! Every sweep point runs `trials` independent pipelines with seeds
//! `seed + trial`; results are written as one raw CSV row per trial plus a
//! per-point summary CSV next to it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bigamp::BigAmpOptions;
use crate::linalg::ComplexMatrix;
use crate::model::SystemConfig;
use crate::pipeline::{
    run_pipeline, PipelineError, PipelineOptions, TrialMetrics, TrialOutput, VampOptions,
};
use crate::svt::SvtOptions;

/// Schema tag written in the first line of every raw CSV.
pub const RAW_SCHEMA: &str = "irs-sim-raw/1";
/// Schema tag written in the first line of every summary CSV.
pub const SUMMARY_SCHEMA: &str = "irs-sim-summary/1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trial {trial} at sweep point {point} failed: {source}")]
    Trial {
        point: usize,
        trial: usize,
        #[source]
        source: PipelineError,
    },
    #[error("trial {trial} at sweep point {point} produced a NaN metric")]
    NanMetric { point: usize, trial: usize },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Trial { .. } | CliError::NanMetric { .. } => 3,
            CliError::Io { .. } | CliError::Csv(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentKind {
    NmseVsSnr,
    ErrorRateVsSnr,
    PhaseTransition,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::NmseVsSnr => "nmse_vs_snr",
            ExperimentKind::ErrorRateVsSnr => "error_rate_vs_snr",
            ExperimentKind::PhaseTransition => "phase_transition",
        }
    }
}

/// Sweep axes. An empty list keeps the base value (`pilot_len`, or the base
/// `sigma` for SNR). Points are the Cartesian product with `pilot_len` outer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub pilot_len: Vec<usize>,
    pub snr_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub bigamp: BigAmpOptions,
    #[serde(default)]
    pub svt: SvtOptions,
    #[serde(default)]
    pub vamp: VampOptions,
}

fn default_trials() -> usize {
    50
}

/// One sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub pilot_len: usize,
    /// `None` for the base noise level.
    pub snr_db: Option<f64>,
}

impl ExperimentSpec {
    /// Reference scenario (`SystemConfig::default`) with the standard sweep for `kind`.
    pub fn reference(kind: ExperimentKind) -> Self {
        let sweep = match kind {
            ExperimentKind::NmseVsSnr => Sweep {
                pilot_len: vec![100],
                snr_db: vec![0.0, 10.0, 20.0, 30.0],
            },
            ExperimentKind::ErrorRateVsSnr => Sweep {
                pilot_len: vec![60, 100],
                snr_db: vec![0.0, 10.0, 20.0],
            },
            ExperimentKind::PhaseTransition => Sweep {
                pilot_len: vec![20, 40, 60, 80, 100, 120],
                snr_db: Vec::new(),
            },
        };
        Self {
            kind,
            trials: default_trials(),
            seed: 0,
            output: PathBuf::from(format!("{}.csv", kind.as_str())),
            system: SystemConfig::default(),
            sweep,
            bigamp: BigAmpOptions::default(),
            svt: SvtOptions::default(),
            vamp: VampOptions::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            bigamp: self.bigamp,
            svt: self.svt,
            vamp: self.vamp,
        }
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let ls = if self.sweep.pilot_len.is_empty() {
            vec![self.system.pilot_len]
        } else {
            self.sweep.pilot_len.clone()
        };
        let snrs: Vec<Option<f64>> = if self.sweep.snr_db.is_empty() {
            vec![None]
        } else {
            self.sweep.snr_db.iter().copied().map(Some).collect()
        };
        ls.iter()
            .flat_map(|&l| {
                snrs.iter().map(move |&s| SweepPoint {
                    pilot_len: l,
                    snr_db: s,
                })
            })
            .collect()
    }

    pub fn config_at(&self, point: &SweepPoint) -> SystemConfig {
        let mut cfg = SystemConfig {
            pilot_len: point.pilot_len,
            ..self.system.clone()
        };
        if let Some(snr) = point.snr_db {
            cfg = cfg.with_snr_db(snr);
        }
        cfg
    }

    /// Checks everything that can be checked without running a trial.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.sweep.pilot_len.contains(&0) {
            return bad("sweep.pilot_len values must be >= 1".into());
        }
        if self.sweep.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("sweep.snr_db values must be finite".into());
        }
        if self.output.as_os_str().is_empty() {
            return bad("output path is empty".into());
        }
        for p in self.points() {
            self.config_at(&p)
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.bigamp
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.svt
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.vamp.iters == 0
            || !(self.vamp.threshold_scale >= 0.0)
            || !(self.vamp.sigma2_floor_rel >= 0.0)
        {
            return bad(format!("invalid vamp options {:?}", self.vamp));
        }
        Ok(())
    }

    /// `<stem>_summary.csv` next to the raw output.
    pub fn summary_path(&self) -> PathBuf {
        let stem = self
            .output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "results".into());
        self.output.with_file_name(format!("{stem}_summary.csv"))
    }
}

/// One raw CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub kind: String,
    pub point: usize,
    pub pilot_len: usize,
    /// `inf` for a noiseless point.
    pub snr_db: f64,
    pub trial: usize,
    pub seed: u64,
    pub active_devices: usize,
    pub nmse_g_db: f64,
    pub nmse_w_db: Option<f64>,
    pub nmse_q_db: Option<f64>,
    pub nmse_h_db: Option<f64>,
    pub activity_error_rate: f64,
    pub false_alarms: usize,
    pub misses: usize,
    pub oracle_error_rate: f64,
    pub success_h: bool,
    pub converged: bool,
    pub bigamp_iters: usize,
    pub bigamp_attempts: usize,
    pub svt_iters: usize,
    pub threshold: f64,
    pub bigamp_ms: Option<f64>,
    pub svt_ms: Option<f64>,
    pub vamp_ms: Option<f64>,
}

impl TrialRow {
    fn new(
        kind: ExperimentKind,
        point: usize,
        cfg: &SystemConfig,
        trial: usize,
        seed: u64,
        out: &TrialOutput,
        timings: bool,
    ) -> Self {
        let m: &TrialMetrics = &out.metrics;
        let d = &out.estimates.diagnostics;
        let t = |v: f64| timings.then_some(v);
        Self {
            kind: kind.as_str().into(),
            point,
            pilot_len: cfg.pilot_len,
            snr_db: cfg.snr_db(),
            trial,
            seed,
            active_devices: m.active_devices,
            nmse_g_db: m.nmse_g_db,
            nmse_w_db: m.nmse_w_db,
            nmse_q_db: m.nmse_q_db,
            nmse_h_db: m.nmse_h_db,
            activity_error_rate: m.activity_error_rate,
            false_alarms: m.false_alarms,
            misses: m.misses,
            oracle_error_rate: m.oracle_error_rate,
            success_h: m.success_h,
            converged: m.converged,
            bigamp_iters: d.bigamp_iters,
            bigamp_attempts: d.bigamp_attempts,
            svt_iters: d.svt_iters,
            threshold: d.threshold,
            bigamp_ms: t(m.runtime.bigamp_ms),
            svt_ms: t(m.runtime.svt_ms),
            vamp_ms: t(m.runtime.vamp_ms),
        }
    }

    fn has_nan(&self) -> bool {
        let opt = |v: Option<f64>| v.is_some_and(f64::is_nan);
        self.nmse_g_db.is_nan()
            || opt(self.nmse_w_db)
            || opt(self.nmse_q_db)
            || opt(self.nmse_h_db)
            || self.activity_error_rate.is_nan()
    }
}

/// Aggregates of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: String,
    pub point: usize,
    pub pilot_len: usize,
    pub snr_db: f64,
    pub trials: usize,
    pub median_nmse_g_db: Option<f64>,
    pub median_nmse_h_db: Option<f64>,
    pub mean_error_rate: f64,
    pub mean_oracle_error_rate: f64,
    pub success_probability: f64,
}

/// Median of the values present; `None` if there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, c) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Summary rows from raw rows, one per point in order of first appearance.
pub fn summarize(rows: &[TrialRow]) -> Vec<SummaryRow> {
    let mut points: Vec<usize> = rows.iter().map(|r| r.point).collect();
    points.dedup();
    points
        .into_iter()
        .map(|p| {
            let group: Vec<&TrialRow> = rows.iter().filter(|r| r.point == p).collect();
            let first = group[0];
            SummaryRow {
                kind: first.kind.clone(),
                point: p,
                pilot_len: first.pilot_len,
                snr_db: first.snr_db,
                trials: group.len(),
                median_nmse_g_db: median(group.iter().map(|r| r.nmse_g_db)),
                median_nmse_h_db: median(group.iter().filter_map(|r| r.nmse_h_db)),
                mean_error_rate: mean(group.iter().map(|r| r.activity_error_rate)),
                mean_oracle_error_rate: mean(group.iter().map(|r| r.oracle_error_rate)),
                success_probability: group.iter().filter(|r| r.success_h).count() as f64
                    / group.len() as f64,
            }
        })
        .collect()
}

/// Options that do not belong to the experiment file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    /// Directory receiving one JSON file of matrices per trial.
    pub stage_dump: Option<PathBuf>,
    /// Adds per-stage runtimes to the raw CSV.
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<TrialRow>,
    pub summary: Vec<SummaryRow>,
}

fn header_comment(schema: &str, spec: &ExperimentSpec) -> String {
    format!(
        "# {schema} kind={} trials={} seed={} | nmse_h_db over truly active columns; error rate = (false alarms + misses) / K; snr_db = 10 log10(1/sigma), inf when noiseless\n",
        spec.kind.as_str(),
        spec.trials,
        spec.seed
    )
}

fn write_csv<T: Serialize>(path: &Path, comment: &str, rows: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    out.write_all(comment.as_bytes()).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads rows written by [`run_experiment`], skipping the schema comment.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    rdr.deserialize()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

/// Runs every trial of `spec` and writes the raw and summary CSVs.
pub fn run_experiment(
    spec: &ExperimentSpec,
    run: &RunOptions,
) -> Result<ExperimentOutput, CliError> {
    spec.validate()?;
    let summary_path = spec.summary_path();
    for path in [&spec.output, &summary_path] {
        File::create(path)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    if let Some(dir) = &run.stage_dump {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    }

    let points = spec.points();
    let tasks: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..spec.trials).map(move |t| (p, t)))
        .collect();
    let opts = spec.pipeline_options();
    let run_task = |&(p, t): &(usize, usize)| -> Result<TrialRow, CliError> {
        let cfg = spec.config_at(&points[p]);
        let seed = spec.seed.wrapping_add(t as u64);
        let out = run_pipeline(&cfg, seed, &opts).map_err(|source| CliError::Trial {
            point: p,
            trial: t,
            source,
        })?;
        if let Some(dir) = &run.stage_dump {
            let path = dir.join(format!("point{p:03}_trial{t:04}.json"));
            let json = serde_json::to_vec(&trial_dump(&out)).expect("dump serializes");
            fs::write(&path, json).map_err(io_err(&path))?;
        }
        let row = TrialRow::new(spec.kind, p, &cfg, t, seed, &out, run.timings);
        if row.has_nan() {
            return Err(CliError::NanMetric { point: p, trial: t });
        }
        Ok(row)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let rows: Vec<TrialRow> =
        pool.install(|| tasks.par_iter().map(run_task).collect::<Result<_, _>>())?;

    let summary = summarize(&rows);
    write_csv(&spec.output, &header_comment(RAW_SCHEMA, spec), &rows)?;
    write_csv(
        &summary_path,
        &header_comment(SUMMARY_SCHEMA, spec),
        &summary,
    )?;
    Ok(ExperimentOutput { rows, summary })
}

#[derive(Serialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Column-major.
    re: Vec<f64>,
    im: Vec<f64>,
}

impl From<&ComplexMatrix> for MatrixJson {
    fn from(m: &ComplexMatrix) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            re: m.iter().map(|z| z.re).collect(),
            im: m.iter().map(|z| z.im).collect(),
        }
    }
}

/// Ground truth and per-stage estimates of one trial as JSON.
pub fn trial_dump(out: &TrialOutput) -> serde_json::Value {
    let s = &out.scene;
    let e = &out.estimates;
    let mat =
        |m: &ComplexMatrix| serde_json::to_value(MatrixJson::from(m)).expect("matrix serializes");
    serde_json::json!({
        "seed": s.seed,
        "truth": {
            "g": mat(&s.g), "h": mat(&s.h), "x": mat(&s.x), "p": mat(&s.p),
            "y": mat(&s.y), "q": mat(&s.q), "w": mat(&s.w),
            "activity": s.activity,
            "pathloss_devices": s.pathloss_devices,
            "pathloss_irs_bs": s.pathloss_irs_bs,
        },
        "stage1": {
            "g_hat": mat(&e.g_hat), "w_hat": mat(&e.w_hat),
            "permutation": e.ambiguity.permutation,
            "scales_re": e.ambiguity.scales.iter().map(|c| c.re).collect::<Vec<_>>(),
            "scales_im": e.ambiguity.scales.iter().map(|c| c.im).collect::<Vec<_>>(),
        },
        "stage2": { "q_hat": mat(&e.q_hat) },
        "stage3": {
            "theta_hat": mat(&e.theta_hat),
            "activity_hat": e.activity_hat,
            "h_hat": mat(&e.h_hat),
        },
        "diagnostics": e.diagnostics,
        "metrics": out.metrics,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "irs-sim",
    about = "Monte-Carlo simulator for IRS-assisted joint activity detection and channel estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a TOML file.
    Run {
        spec_file: PathBuf,
        /// Override the number of trials per sweep point.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the raw CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Write per-trial matrices as JSON into this directory.
        #[arg(long)]
        stage_dump: Option<PathBuf>,
        /// Add per-stage runtimes to the raw CSV.
        #[arg(long)]
        timings: bool,
    },
    /// Print the reference experiment file for a kind.
    Template {
        #[arg(value_enum)]
        kind: ExperimentKind,
    },
}

/// Entry point shared by the binary and the tests.
pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Template { kind } => {
            print!("{}", ExperimentSpec::reference(kind).to_toml());
            Ok(())
        }
        Command::Run {
            spec_file,
            trials,
            seed,
            out,
            workers,
            stage_dump,
            timings,
        } => {
            let text = fs::read_to_string(&spec_file).map_err(|e| {
                CliError::Config(format!("cannot read {}: {e}", spec_file.display()))
            })?;
            let mut spec = ExperimentSpec::from_toml(&text)?;
            if let Some(t) = trials {
                spec.trials = t;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(o) = out {
                spec.output = o;
            }
            if workers == Some(0) {
                return Err(CliError::Config("--workers must be >= 1".into()));
            }
            let run = RunOptions {
                workers,
                stage_dump,
                timings,
            };
            let result = run_experiment(&spec, &run)?;
            for s in &result.summary {
                println!(
                    "L={} snr_db={} trials={} median_nmse_g_db={} median_nmse_h_db={} mean_error_rate={} success_probability={}",
                    s.pilot_len,
                    s.snr_db,
                    s.trials,
                    s.median_nmse_g_db.map_or("-".into(), |v| format!("{v:.2}")),
                    s.median_nmse_h_db.map_or("-".into(), |v| format!("{v:.2}")),
                    s.mean_error_rate,
                    s.success_probability
                );
            }
            Ok(())
        }
    }
}

/// Parses the process arguments, runs, and maps errors to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irs-sim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
