//! End-to-end checks of the `stacking` binary: exit codes, output files and
//! their formats.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stacking_design::multilevel::MultiLevelEmulator;

const BIN: &str = env!("CARGO_BIN_EXE_stacking");

fn stacking(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn run_currin(dir: &Path) -> Output {
    stacking(&["run", "--sim", "currin", "--epsilon", "1", "--seed", "0", "--out", dir.to_str().unwrap()])
}

#[test]
fn currin_run_writes_four_stage_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_currin(dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(dir.path().join("stages.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "L,l,xi_l,C_l,n_l,alpha_hat,sim_bound,emu_bound,cum_cost,converged"
    );
    let stages: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages.into_iter().collect::<Vec<_>>(), ["1", "2", "3", "4"]);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "stacking-design/report/v1");
    assert_eq!(report["converged"], true);
    assert_eq!(report["final_level"], 4);
    for key in ["config", "stages", "sample_sizes", "total_cost", "simulator_calls"] {
        assert!(report.get(key).is_some(), "report.json lacks {key}");
    }
    let stage = &report["stages"][3];
    for key in ["L", "levels", "alpha_hat", "simulation_bound", "emulation_bound", "mu_star", "cumulative_cost", "converged"] {
        assert!(stage.get(key).is_some(), "stage lacks {key}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("sim_bound") && stdout.contains("converged at L=4"));
}

#[test]
fn same_seed_gives_identical_stages_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_currin(a.path())), 0);
    assert_eq!(code(&run_currin(b.path())), 0);
    let read = |d: &Path| fs::read(d.join("stages.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn negative_epsilon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stacking(&["run", "--epsilon", "-1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
}

#[test]
fn bad_norm_and_unknown_simulator_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&stacking(&["run", "--epsilon", "1", "--norm", "l3", "--out", d])), 2);
    assert_eq!(code(&stacking(&["run", "--epsilon", "1", "--sim", "nope", "--out", d])), 2);
    assert_eq!(code(&stacking(&["run", "--epsilon", "1", "--bogus-flag"])), 2);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"sim": "poissonlike", "epsilon": -3, "T": 2}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let out_dir = dir.path().join("o");
    let o = out_dir.to_str().unwrap();
    assert_eq!(code(&stacking(&["run", "--config", c, "--out", o])), 2);
    let out = stacking(&["run", "--config", c, "--epsilon", "0.01", "--out", o]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert!(report.contains("\"epsilon\": 0.01"));

    fs::write(&cfg, r#"{"sim": "currin", "epsilon": 1, "colour": "red"}"#).unwrap();
    assert_eq!(code(&stacking(&["run", "--config", c, "--out", o])), 2);
}

#[test]
fn level_limit_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = stacking(&["run", "--epsilon", "1", "--max-levels", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    // Partial stage reports are still written.
    assert!(dir.path().join("stages.csv").exists());
    assert!(!dir.path().join("emulator.json").exists());
}

#[test]
fn unreachable_target_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"sim": "poissonlike", "epsilon": 1e-9, "max_level_points": 40}"#).unwrap();
    let out = stacking(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn crashing_external_simulator_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let sim = format!("cmd:{BIN} test-sim --mode crash");
    let out = stacking(&["run", "--epsilon", "1", "--sim", &sim, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("crashed"));
}

#[test]
fn missing_external_program_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = stacking(&[
        "run",
        "--epsilon",
        "1",
        "--sim",
        "cmd:/nonexistent/simulator",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn predict_round_trip_and_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_currin(dir.path())), 0);
    let em_path = dir.path().join("emulator.json");
    let em = MultiLevelEmulator::from_json(&fs::read_to_string(&em_path).unwrap()).unwrap();

    // At a point of the finest design the emulator reproduces the stored f_L.
    let top = em.levels.last().unwrap();
    let x = &top.design()[2];
    let stored = top.values[2];
    let pts = dir.path().join("pts.csv");
    fs::write(&pts, format!("x1,x2\n{},{}\n0.3,0.7\n", x[0], x[1])).unwrap();
    let pred = dir.path().join("pred.csv");
    let e = em_path.to_str().unwrap();
    let out = stacking(&["predict", "--emulator", e, "--points", pts.to_str().unwrap(), "--output", pred.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&pred).unwrap();
    let rows: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows[0], ["x1", "x2", "prediction", "lower", "upper"]);
    assert_eq!(rows.len(), 3);
    let p: f64 = rows[1][2].parse().unwrap();
    assert!((p - stored).abs() <= 1e-8 * (1.0 + stored.abs()), "{p} vs {stored}");
    let (lo, hi): (f64, f64) = (rows[2][3].parse().unwrap(), rows[2][4].parse().unwrap());
    let mid: f64 = rows[2][2].parse().unwrap();
    assert!(lo < mid && mid < hi);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = stacking(&["predict", "--emulator", e, "--points", empty.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "0.1,0.2\n0.3,0.4\n0.5\n").unwrap();
    let out = stacking(&["predict", "--emulator", e, "--points", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, r#"{"schema": "something-else"}"#).unwrap();
    let out = stacking(&["predict", "--emulator", broken.to_str().unwrap(), "--points", pts.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sweep_on_builtin_reports_achieved_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stacking(&["sweep", "--sim", "currin", "--epsilons", "4,2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["epsilon", "achieved_error", "total_cost", "L_final", "n_l"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let eps: f64 = r[0].parse().unwrap();
        let err: f64 = r[1].parse().unwrap();
        assert!(err <= eps, "achieved {err} above tolerance {eps}");
        let levels: usize = r[3].parse().unwrap();
        assert_eq!(r[4].split(';').count(), levels);
    }
}

#[test]
fn sweep_without_oracle_omits_error_column() {
    let dir = tempfile::tempdir().unwrap();
    let sim = format!("cmd:{BIN} test-sim --mode echo");
    let out = stacking(&["sweep", "--sim", &sim, "--epsilons", "0.5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("achieved_error column omitted"));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epsilon,total_cost,L_final,n_l");
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn sweep_rejects_nonpositive_tolerances() {
    let dir = tempfile::tempdir().unwrap();
    let out = stacking(&["sweep", "--epsilons", "1,0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}
