use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn odyn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_odyn"));
    c.env_remove("ODYN_OUT_DIR");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("odyn_cli_{}_{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    odyn().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "odyn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn risks(path: &Path) -> Vec<(f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',').map(|v| v.parse::<f64>().unwrap());
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect()
}

/// Rows of a CSV as header-keyed maps.
fn table(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines.map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect()).collect()
}

const PERFECT_K1: &str = r#"{"q":[[1.0,1.0],[1.0,1.0]],"m":[[1.0],[1.0]],"p":[[1.0]]}"#;

#[test]
fn simulate_smoke_run_writes_files() {
    let dir = scratch("smoke");
    let stdout = ok(&dir, &["simulate", "--k", "2", "--p", "10", "--d", "100", "--gamma", "0.05", "--delta", "0", "--act", "erf", "--T", "5", "--seed", "1", "--svg"]);
    assert!(stdout.contains("terminal risk"));
    assert!(stdout.contains("max Q_jj"));
    let csv = dir.join("out/run_seed1_simulate-weight.csv");
    assert!(fs::read_to_string(&csv).unwrap().starts_with("t,risk"));
    assert!(dir.join("out/run_seed1_simulate-weight.svg").exists());
    let toml = fs::read_to_string(dir.join("out/run_seed1_simulate-weight.toml")).unwrap();
    assert!(toml.contains("schema_version = 1"));
}

#[test]
fn zero_horizon_gives_a_single_row() {
    let dir = scratch("t0");
    ok(&dir, &["simulate", "--k", "2", "--p", "10", "--d", "100", "--gamma", "0.05", "--T", "0"]);
    assert_eq!(risks(&dir.join("out/run_seed0_simulate-weight.csv")).len(), 1);
}

#[test]
fn unrealisable_width_is_a_config_error() {
    let dir = scratch("kp");
    let out = run(&dir, &["simulate", "--k", "3", "--p", "2", "--d", "100", "--gamma", "0.05", "--T", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k <= p"));
}

#[test]
fn missing_flags_and_bad_regimes_are_config_errors() {
    let dir = scratch("usage");
    assert_eq!(run(&dir, &["simulate", "--k", "1", "--p", "2", "--gamma", "0.1", "--T", "1"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["integrate", "--k", "1", "--p", "2", "--d", "5", "--gamma", "0.1", "--T", "1"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["integrate", "--regime", "mf", "--k", "2", "--p", "2", "--d", "2", "--gamma", "0.1", "--T", "1"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["integrate", "--regime", "gf", "--k", "1", "--p", "2", "--d", "5", "--gamma", "0.1", "--T", "1", "--dt", "0.5"]).status.code(), Some(2));
}

#[test]
fn divergence_is_a_numerical_abort() {
    let dir = scratch("diverge");
    let out = run(&dir, &["simulate", "--act", "square", "--k", "1", "--p", "2", "--d", "100", "--gamma", "100", "--T", "50", "--mode", "overlap"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

#[test]
fn bound_monitor_stops_the_run() {
    let dir = scratch("bound");
    let stdout = ok(&dir, &["simulate", "--act", "square", "--k", "1", "--p", "2", "--d", "100", "--gamma", "100", "--T", "50", "--mode", "overlap", "--bound", "100"]);
    assert!(stdout.contains("bound violated"));
}

#[test]
fn runs_are_byte_identical_for_a_fixed_seed() {
    let (a, b) = (scratch("det_a"), scratch("det_b"));
    let state = a.join("state.json");
    fs::write(&state, r#"{"q":[[1.0,0.2],[0.2,0.8]],"m":[[0.3],[0.1]],"p":[[1.0]]}"#).unwrap();
    let s = state.to_str().unwrap();
    for dir in [&a, &b] {
        ok(dir, &["integrate", "--regime", "gf", "--k", "1", "--p", "2", "--d", "50", "--gamma", "0.1", "--T", "3", "--state-file", s, "--snapshots"]);
        ok(dir, &["simulate", "--k", "1", "--p", "2", "--d", "50", "--gamma", "0.1", "--T", "3", "--seed", "4"]);
    }
    for f in ["out/run_seed0_gf.csv", "out/run_seed4_simulate-weight.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ss_and_gf_agree_at_small_learning_rate() {
    let dir = scratch("ssgf");
    let common = ["--k", "2", "--p", "4", "--d", "100", "--gamma", "0.004", "--T", "5", "--seed", "3"];
    for regime in ["ss", "gf"] {
        let mut args = vec!["integrate", "--regime", regime];
        args.extend(common);
        ok(&dir, &args);
    }
    let stdout = ok(&dir, &["compare", "out/run_seed3_ss.csv", "out/run_seed3_gf.csv", "--out", "report.json"]);
    assert!(stdout.contains("sup_risk_gap"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let gap = report["sup_risk_gap"].as_f64().unwrap();
    assert!(gap < 1e-2, "gap {gap}");
}

#[test]
fn compare_reads_json_and_rejects_disjoint_ranges() {
    let dir = scratch("cmp");
    ok(&dir, &["integrate", "--regime", "gf", "--k", "1", "--p", "2", "--d", "10", "--gamma", "0.1", "--T", "1", "--json", "--tag", "a"]);
    let stdout = ok(&dir, &["compare", "out/a_seed0_gf.json", "out/a_seed0_gf.csv"]);
    assert!(stdout.contains("sup_risk_gap 0.000000e0"), "{stdout}");
    fs::write(dir.join("late.csv"), "t,risk\n5,0.1\n6,0.2\n").unwrap();
    assert_ne!(run(&dir, &["compare", "out/a_seed0_gf.csv", "late.csv"]).status.code(), Some(0));
}

#[test]
fn hdmf_square_risk_decreases_to_a_plateau() {
    let dir = scratch("hdmf");
    ok(&dir, &["integrate", "--regime", "hdmf", "--act", "square", "--k", "5", "--d", "1000", "--gamma", "10", "--p", "512", "--T", "20", "--dt", "0.05", "--seed", "2"]);
    let r: Vec<f64> = risks(&dir.join("out/run_seed2_hdmf.csv")).into_iter().map(|(_, r)| r).collect();
    assert!(r.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "risk is not monotone");
    let tail = &r[r.len() * 4 / 5..];
    let spread = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max) - tail.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(r[0] > 10.0 * r[r.len() - 1] && spread < 0.05 * r[0], "no plateau: start {} end {} spread {spread}", r[0], r[r.len() - 1]);
}

#[test]
fn config_file_round_trips_and_flags_override() {
    let dir = scratch("cfg");
    let cfg = dir.join("exp.toml");
    fs::write(&cfg, "d = 20\np = 3\nk = 1\ngamma = 0.1\nregime = \"gf\"\nT = 1.0\nseed = 9\ntag = \"file\"\n").unwrap();
    ok(&dir, &["integrate", "--config", cfg.to_str().unwrap(), "--T", "2"]);
    let written = dir.join("out/file_seed9_gf.toml");
    let canonical = fs::read_to_string(&written).unwrap();
    assert!(canonical.contains("T = 2.0"));
    // The canonical form reproduces the run exactly.
    let again = scratch("cfg_again");
    ok(&again, &["integrate", "--config", written.to_str().unwrap()]);
    assert_eq!(fs::read(dir.join("out/file_seed9_gf.csv")).unwrap(), fs::read(again.join("out/file_seed9_gf.csv")).unwrap());
    assert_eq!(fs::read_to_string(again.join("out/file_seed9_gf.toml")).unwrap(), canonical);

    fs::write(&cfg, "d = 20\np = 3\nk = 1\ngamma = 0.1\nregime = \"gf\"\nT = 1.0\nlearning_rate = 2\n").unwrap();
    let out = run(&dir, &["integrate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn out_dir_env_var_is_the_default() {
    let dir = scratch("env");
    let target = dir.join("elsewhere");
    let out = odyn()
        .current_dir(&dir)
        .env("ODYN_OUT_DIR", &target)
        .args(["integrate", "--regime", "gf", "--k", "1", "--p", "2", "--d", "10", "--gamma", "0.1", "--T", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("run_seed0_gf.csv").exists());
    assert!(!dir.join("out").exists());
}

fn write_sweep(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("sweep.toml");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn one_point_sweep_matches_simulate() {
    let dir = scratch("sweep1");
    let spec = write_sweep(
        &dir,
        "metric = \"terminal_risk\"\n[base]\nd = 30\np = 3\nk = 1\ngamma = 0.1\nregime = \"simulate\"\nT = 2.0\nseed = 5\n",
    );
    ok(&dir, &["sweep", spec.to_str().unwrap(), "--out", "sw", "--workers", "1"]);
    ok(&dir, &["simulate", "--d", "30", "--p", "3", "--k", "1", "--gamma", "0.1", "--T", "2", "--seed", "5"]);
    let rows = table(&dir.join("sw/sweep.csv"));
    assert_eq!(rows.len(), 1);
    let metric: f64 = rows[0]["metric"].parse().unwrap();
    let terminal = risks(&dir.join("out/run_seed5_simulate-weight.csv")).last().unwrap().1;
    assert_eq!(metric, terminal);
}

#[test]
fn sweeps_resume_and_report_partial_failure() {
    let dir = scratch("resume");
    let spec = write_sweep(
        &dir,
        "metric = \"terminal_risk\"\n[base]\nd = 100\np = 2\nk = 1\ngamma = 0.1\nactivation = \"square\"\nregime = \"simulate\"\nT = 20.0\n\
         [base.simulation]\nmode = \"overlap\"\n[axes]\ngamma = [0.1, 100.0]\nseed = [1, 2]\n",
    );
    let s = spec.to_str().unwrap();
    let out = run(&dir, &["sweep", s, "--out", "sw", "--workers", "2"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = table(&dir.join("sw/sweep.csv"));
    let status: Vec<&str> = rows.iter().map(|r| r["status"].as_str()).collect();
    assert_eq!(status, ["ok", "ok", "failed", "failed"]);
    let phase = table(&dir.join("sw/phase_map.csv"));
    assert_eq!((phase[0]["n_ok"].as_str(), phase[1]["n_failed"].as_str()), ("2", "2"));

    fs::remove_file(dir.join("sw/points/pt00001.json")).unwrap();
    let out = run(&dir, &["sweep", s, "--out", "sw", "--workers", "2"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("(1 resumed, 2 failed)"), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn plateau_sweep_increases_with_noise() {
    let dir = scratch("plateau");
    let spec = write_sweep(
        &dir,
        "metric = \"plateau_level\"\n[base]\nd = 100\np = 8\nk = 4\ngamma = 0.05\nregime = \"gf-noise\"\nT = 200.0\n\
         [base.integrator]\ndt = 0.1\n[axes]\ndelta = [1e-4, 1e-3, 1e-2]\n",
    );
    ok(&dir, &["sweep", spec.to_str().unwrap(), "--out", "sw"]);
    let levels: Vec<f64> = table(&dir.join("sw/phase_map.csv")).iter().map(|r| r["mean"].parse().unwrap()).collect();
    assert_eq!(levels.len(), 3);
    assert!(levels.windows(2).all(|w| w[1] > w[0]), "{levels:?}");
}

#[test]
fn scaling_sweep_gap_halves_per_fourfold_dimension() {
    let dir = scratch("scaling");
    let spec = write_sweep(
        &dir,
        "metric = \"sup_risk_gap\"\nreference = \"ss\"\n[base]\nd = 100\np = 4\nk = 2\ngamma = 0.5\nregime = \"simulate\"\nT = 10.0\n\
         [base.simulation]\nmode = \"overlap\"\n[axes]\nd = [100, 400, 1600]\nseed = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]\n",
    );
    ok(&dir, &["sweep", spec.to_str().unwrap(), "--out", "sw"]);
    let gaps: Vec<f64> = table(&dir.join("sw/phase_map.csv")).iter().map(|r| r["mean"].parse().unwrap()).collect();
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..=3.0).contains(&ratio), "ratio {ratio} in {gaps:?}");
    }
}

fn histogram_counts(path: &Path) -> Vec<(f64, f64, f64, u64)> {
    table(path)
        .iter()
        .map(|r| (r["t"].parse().unwrap(), r["bin_lo"].parse().unwrap(), r["bin_hi"].parse().unwrap(), r["count"].parse().unwrap()))
        .collect()
}

#[test]
fn initial_cosines_are_uniform_in_three_dimensions() {
    let dir = scratch("hist_uniform");
    ok(&dir, &["histogram", "--p", "5000", "--k", "1", "--d", "3", "--gamma", "0.1", "--times", "0", "--bins", "10", "--seed", "11"]);
    let counts = histogram_counts(&dir.join("out/run_seed11_histogram.csv"));
    let expected = 500.0;
    let chi2: f64 = counts.iter().map(|c| (c.3 as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of χ² with 9 degrees of freedom.
    assert!(chi2 < 21.666, "χ² = {chi2}");
}

#[test]
fn perfect_learning_puts_all_mass_at_one() {
    let dir = scratch("hist_perfect");
    let state = dir.join("perfect.json");
    fs::write(&state, PERFECT_K1).unwrap();
    ok(&dir, &["integrate", "--regime", "gf", "--k", "1", "--p", "2", "--d", "10", "--gamma", "0.1", "--T", "1", "--state-file", state.to_str().unwrap(), "--snapshots"]);
    ok(&dir, &["histogram", "--trajectory", "out/run_seed0_gf.csv", "--times", "0,1", "--bins", "10"]);
    let counts = histogram_counts(&dir.join("out/run_seed0_gf_histogram.csv"));
    for (_, _, hi, c) in &counts {
        assert_eq!(*c, if *hi == 1.0 { 2 } else { 0 });
    }
    let out = run(&dir, &["histogram", "--trajectory", "out/run_seed0_gf.toml", "--times", "0"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn specialized_cosines_are_bimodal() {
    let dir = scratch("hist_special");
    ok(&dir, &["integrate", "--regime", "ss", "--k", "2", "--p", "10", "--d", "500", "--gamma", "0.05", "--T", "400", "--dt", "0.1", "--seed", "24", "--sigma0", "1", "--snapshots", "--record-every", "100"]);
    ok(&dir, &["histogram", "--trajectory", "out/run_seed24_ss.csv", "--times", "0,400", "--bins", "10"]);
    let counts = histogram_counts(&dir.join("out/run_seed24_ss_histogram.csv"));
    let near = |t: f64, lo: f64, hi: f64| counts.iter().filter(|c| c.0 == t && c.1 >= lo - 1e-12 && c.2 <= hi + 1e-12).map(|c| c.3).sum::<u64>();
    // 20 cosines at each time; at the end every one sits near 0 or near 1.
    assert_eq!(near(400.0, -0.2, 0.2) + near(400.0, 0.8, 1.0), 20);
    assert_eq!(near(400.0, 0.8, 1.0), 10);
    assert_eq!(near(0.0, -0.2, 0.2), 20);
}
