use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use irs_amp::cli::{median, read_csv, summarize, ExperimentSpec, SummaryRow, TrialRow};

fn irs_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irs-sim"))
        .args(args)
        .output()
        .unwrap()
}

fn write_spec(dir: &Path, body: &str) -> String {
    let path = dir.join("spec.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_spec(out: &Path, trials: usize) -> String {
    format!(
        r#"kind = "error_rate_vs_snr"
trials = {trials}
seed = 7
output = "{}"

[system]
antennas = 6
irs_elements = 3
devices = 20

[sweep]
pilot_len = [20, 30]
snr_db = [10.0, 125.0]
"#,
        out.display()
    )
}

#[test]
fn single_trial_single_point_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one.csv");
    let spec = write_spec(dir.path(), &small_spec(&out, 5));
    let res = irs_sim(&["run", &spec, "--trials", "1", "--workers", "1"]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let rows: Vec<TrialRow> = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 4);

    let text = r#"kind = "nmse_vs_snr"
trials = 1
output = "OUT"
[system]
antennas = 6
irs_elements = 3
devices = 20
pilot_len = 20
"#
    .replace("OUT", &out.display().to_string());
    let spec = write_spec(dir.path(), &text);
    let res = irs_sim(&["run", &spec]);
    assert!(res.status.success());
    let raw = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = raw.lines().collect();
    assert!(lines[0].starts_with("# irs-sim-raw/1"));
    assert!(lines[1].starts_with("kind,point,pilot_len,snr_db,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn summary_matches_aggregates_of_raw_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("agg.csv");
    let spec = write_spec(dir.path(), &small_spec(&out, 3));
    assert!(irs_sim(&["run", &spec]).status.success());
    let rows: Vec<TrialRow> = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 12);
    let summary: Vec<SummaryRow> = read_csv(&dir.path().join("agg_summary.csv")).unwrap();
    assert_eq!(summary, summarize(&rows));
    // recompute one point by hand
    let p0: Vec<&TrialRow> = rows.iter().filter(|r| r.point == 0).collect();
    assert_eq!(
        summary[0].median_nmse_g_db,
        median(p0.iter().map(|r| r.nmse_g_db))
    );
    let mean_err = p0.iter().map(|r| r.activity_error_rate).sum::<f64>() / 3.0;
    assert_eq!(summary[0].mean_error_rate, mean_err);
    // points are ordered L-major and seeds are base + trial
    let order: Vec<(usize, usize, u64)> = rows
        .iter()
        .map(|r| (r.pilot_len, r.trial, r.seed))
        .collect();
    assert_eq!(order[0], (20, 0, 7));
    assert_eq!(order[5], (20, 2, 9));
    assert_eq!(order[6], (30, 0, 7));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("det.csv");
    let spec = write_spec(dir.path(), &small_spec(&out, 2));
    assert!(irs_sim(&["run", &spec, "--workers", "1"]).status.success());
    let first = (
        fs::read(&out).unwrap(),
        fs::read(dir.path().join("det_summary.csv")).unwrap(),
    );
    assert!(irs_sim(&["run", &spec, "--workers", "3"]).status.success());
    let second = (
        fs::read(&out).unwrap(),
        fs::read(dir.path().join("det_summary.csv")).unwrap(),
    );
    assert_eq!(first, second);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &small_spec(&dir.path().join("ignored.csv"), 5));
    let out = dir.path().join("flag.csv");
    let res = irs_sim(&[
        "run",
        &spec,
        "--trials",
        "2",
        "--seed",
        "100",
        "--out",
        out.to_str().unwrap(),
        "--timings",
    ]);
    assert!(res.status.success());
    assert!(!dir.path().join("ignored.csv").exists());
    let rows: Vec<TrialRow> = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.seed == 100 || r.seed == 101));
    assert!(rows
        .iter()
        .all(|r| r.bigamp_ms.is_some() && r.vamp_ms.is_some()));
}

#[test]
fn config_errors_exit_nonzero_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad.csv");
    let body = small_spec(&out, 1).replace("trials = 1", "trials = 0");
    let res = irs_sim(&["run", &write_spec(dir.path(), &body)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());

    let body = small_spec(&out, 1).replace("pilot_len = [20, 30]", "pilot_len = [0]");
    assert_eq!(
        irs_sim(&["run", &write_spec(dir.path(), &body)])
            .status
            .code(),
        Some(2)
    );

    let body = small_spec(&out, 1).replace("devices = 20", "devices = 20\nrho = 1.5");
    assert_eq!(
        irs_sim(&["run", &write_spec(dir.path(), &body)])
            .status
            .code(),
        Some(2)
    );

    let body = small_spec(&dir.path().join("no/such/dir/x.csv"), 1);
    let res = irs_sim(&["run", &write_spec(dir.path(), &body)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("cannot write"));

    assert_eq!(
        irs_sim(&["run", "/nonexistent/spec.toml"]).status.code(),
        Some(2)
    );
    assert_ne!(irs_sim(&["run"]).status.code(), Some(0));
}

#[test]
fn stage_dump_writes_one_json_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    let spec = write_spec(dir.path(), &small_spec(&out, 1));
    let dump = dir.path().join("dump");
    assert!(
        irs_sim(&["run", &spec, "--stage-dump", dump.to_str().unwrap()])
            .status
            .success()
    );
    let mut files: Vec<_> = fs::read_dir(&dump)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 4);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&files[0]).unwrap()).unwrap();
    assert_eq!(v["truth"]["g"]["rows"], 6);
    assert_eq!(v["truth"]["g"]["cols"], 3);
    assert_eq!(v["stage2"]["q_hat"]["re"].as_array().unwrap().len(), 3 * 20);
    assert_eq!(v["stage3"]["activity_hat"].as_array().unwrap().len(), 20);
    assert_eq!(v["seed"], 7);
}

#[test]
fn templates_parse_and_reproduce_the_default() {
    for kind in ["nmse_vs_snr", "error_rate_vs_snr", "phase_transition"] {
        let res = irs_sim(&["template", kind]);
        assert!(res.status.success());
        let spec = ExperimentSpec::from_toml(&String::from_utf8(res.stdout).unwrap()).unwrap();
        assert_eq!(spec.kind.as_str(), kind);
        assert_eq!(spec.system.devices, 200);
        assert_eq!(spec.system.irs_elements, 15);
        assert_eq!(spec.system.antennas, 30);
    }
}
