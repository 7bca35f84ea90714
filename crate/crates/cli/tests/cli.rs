use latent_evi::bss::UnmixingMethod;
use latent_evi::evt::{Method, TailSpec};
use latent_evi::rolling;
use latent_evi::simulate::{self, Seed};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latent-evi"));
    c.env_remove("LATENT_EVI_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Four mixed heavy-tailed columns with a leading date column.
fn write_returns(path: &Path, n: usize) -> Vec<Vec<f64>> {
    let seed = Seed::new(31);
    let cols: Vec<Vec<f64>> = [0.7, 0.2, -0.4, 0.0]
        .iter()
        .enumerate()
        .map(|(k, &phi)| simulate::ar1_sample(phi, n, &mut seed.rng(0, k as u64)).unwrap())
        .collect();
    let mut text = String::from("date,a,b,c,d\n");
    for (t, (((a, b), c), d)) in cols[0].iter().zip(&cols[1]).zip(&cols[2]).zip(&cols[3]).enumerate() {
        let day = 1 + t % 28;
        let month = 1 + (t / 28) % 12;
        let year = 2000 + t / (28 * 12);
        text.push_str(&format!(
            "{year:04}-{month:02}-{day:02},{},{},{},{}\n",
            a,
            a + b,
            c - 0.5 * b,
            d + 0.3 * a
        ));
    }
    fs::write(path, text).unwrap();
    // Values as re-read from the file.
    let csv_cols = |t: usize| {
        let line = fs::read_to_string(path).unwrap();
        line.lines()
            .skip(1)
            .map(|l| l.split(',').nth(t + 1).unwrap().parse::<f64>().unwrap())
            .collect::<Vec<f64>>()
    };
    (0..4).map(csv_cols).collect()
}

#[test]
fn minimal_simulation_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["simulate", "--scenario", "paper-appB", "--replications", "1", "--sizes", "300", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["summary.csv", "histograms.csv", "scenario.json", "rate.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(stdout(&o).contains("rate verdict: consistency true"));
}

#[test]
fn simulation_output_is_reproducible_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let common = ["simulate", "--scenario", "paper-sec5", "--replications", "4", "--sizes", "300,1000", "--records"];
    let o = bin().args(common).args(["--out", p(&a)]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin().args(common).args(["--out", p(&b), "--threads", "1"]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["summary.csv", "histograms.csv", "records.csv", "scenario.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["simulate", "--scenario", "paper-appB", "--replications", "1", "--sizes", "300", "--out", p(dir.path())])
        .env("LATENT_EVI_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let spec: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("scenario.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 99);
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = include_str!("../scenarios/paper-appB.json").replacen("\"name\"", "\"colour\": 1, \"name\"", 1);
    fs::write(&bad, text).unwrap();
    assert_eq!(code(&run(&["simulate", "--scenario", p(&bad)])), 2);
    assert_eq!(code(&run(&["simulate", "--scenario", "paper-appB", "--sizes", "5"])), 2);
    assert_eq!(code(&run(&["simulate", "--scenario", "does-not-exist.json"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn estimate_matches_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("returns.csv");
    let cols = write_returns(&input, 600);
    let out = dir.path().join("est");
    let o = run(&["estimate", "--input", p(&input), "--unmixer", "sobi:6", "--tail", "sqrt", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let unmixer: UnmixingMethod = "sobi:6".parse().unwrap();
    let lib = rolling::estimate_latent(&cols, Some(&unmixer), &[Method::Hill, Method::Moment], &TailSpec::Sqrt).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("estimates.json")).unwrap()).unwrap();
    let rows = report["estimates"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for (row, e) in rows.iter().zip(&lib.estimates) {
        assert_eq!(row["k_n"].as_u64(), Some(e.k_n as u64));
    }
    // Exact comparison through the CSV; std float parsing round-trips exactly.
    let csv = fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert!(csv.starts_with("component,name,estimator,gamma_hat,k_n,clamped,error\n1,component1,hill,"));
    for (line, e) in csv.lines().skip(1).zip(&lib.estimates) {
        let g: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(Some(g), e.gamma_hat);
    }
}

#[test]
fn single_column_is_estimated_without_unmixing() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("one.csv");
    let x = simulate::pareto_sample(4.0, 2500, &mut Seed::new(5).rng(0, 0)).unwrap();
    let mut text = String::from("loss\n");
    for v in &x {
        text.push_str(&format!("{v}\n"));
    }
    fs::write(&input, text).unwrap();
    let out = dir.path().join("est");
    let o = run(&["estimate", "--input", p(&input), "--methods", "hill", "--tail", "50", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("estimates.json")).unwrap()).unwrap();
    assert!(report["unmixer"].is_null());
    let expected = latent_evi::evt::hill(&x, &TailSpec::Fixed { k: 50 }).unwrap().gamma_hat;
    assert_eq!(report["estimates"][0]["gamma_hat"].as_f64(), Some(expected));
    assert_eq!(report["estimates"][0]["name"], "loss");
}

#[test]
fn rolling_writes_traces_and_loadings() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("returns.csv");
    write_returns(&input, 300);
    let out = dir.path().join("roll");
    let o = run(&["rolling", "--input", p(&input), "--input-kind", "returns", "--tails", "left,right,abs", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let series = fs::read_to_string(out.join("series_traces.csv")).unwrap();
    assert!(series.starts_with("center_index,date,a_left,a_right,a_abs,b_left"));
    assert_eq!(series.lines().count(), 1 + 300 - 60 + 1);
    let loadings = fs::read_to_string(out.join("loadings.csv")).unwrap();
    assert!(loadings.starts_with("series,factor1,factor2,factor3,factor4\na,"));
    assert!(out.join("factor_traces.csv").exists());

    let full = dir.path().join("full");
    let o = run(&["rolling", "--input", p(&input), "--input-kind", "returns", "--window", "300", "--factors", "none", "--out", p(&full)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(full.join("series_traces.csv")).unwrap().lines().count(), 2);
    assert!(!full.join("loadings.csv").exists());
}

#[test]
fn rolling_input_errors_exit_2() {
    assert_eq!(code(&run(&["rolling", "--input", "/definitely/missing.csv"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("r.csv");
    write_returns(&input, 50);
    assert_eq!(code(&run(&["rolling", "--input", p(&input), "--input-kind", "returns"])), 2);
    // Returns are not valid prices.
    assert_eq!(code(&run(&["rolling", "--input", p(&input), "--window", "20"])), 2);
}

#[test]
fn check_passes_and_reports_rate_verdict() {
    let o = run(&["check", "--instances", "2000", "--scenario", "paper-sec5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("rate verdict: consistency true, normality true"));
}

#[test]
fn injected_fault_exits_1_with_counterexample() {
    let o = run(&["check", "--instances", "500", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("counterexample monotone_order"), "{err}");
    assert!(err.contains("y_a ="));
}
