use crate::{CheckArgs, CliError, EstimateArgs, InputKind, RollingArgs, SimulateArgs};
use latent_evi::bss::{Separator, UnmixingMethod};
use latent_evi::checks;
use latent_evi::evt::{Method, TailSpec};
use latent_evi::experiments::{self, ScenarioSpec, StudySummary};
use latent_evi::rolling::{self, DatedTable, RollingEviTrace, TailSide};
use latent_evi::simulate::Seed;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

const BUNDLED: [(&str, &str); 2] = [
    ("paper-sec5", include_str!("../scenarios/paper-sec5.json")),
    ("paper-appB", include_str!("../scenarios/paper-appB.json")),
];

fn config(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

/// A bundled scenario by name, otherwise a JSON file path.
fn load_scenario(name: &str) -> Result<ScenarioSpec, CliError> {
    let text = match BUNDLED.iter().find(|(n, _)| *n == name) {
        Some((_, text)) => text.to_string(),
        None => fs::read_to_string(name).map_err(|e| {
            config(format!(
                "cannot read scenario '{name}' ({e}); bundled scenarios: paper-sec5, paper-appB"
            ))
        })?,
    };
    serde_json::from_str(&text).map_err(|e| config(format!("scenario '{name}': {e}")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

fn print_summary(spec: &ScenarioSpec, summary: &StudySummary) {
    println!(
        "scenario {}: {} components, {}, {} replication(s), tail {}",
        spec.name,
        spec.p(),
        spec.unmixer,
        spec.replications,
        spec.tail
    );
    println!(
        "{:>10} {:>7} {:>5} {:>9} {:>9} {:>9} {:>7} {:>7} {:>9} {:>9} {:>5}",
        "n", "method", "k_n", "q1", "median", "q3", "agree", "overlap", "mean_z", "mean_zhat", "fail"
    );
    for c in &summary.cells {
        let q = c.scaled_diff;
        println!(
            "{:>10} {:>7} {:>5} {:>9} {:>9} {:>9} {:>7} {:>7} {:>9} {:>9} {:>5}",
            c.n,
            c.method.as_str(),
            c.k_n,
            opt(q.map(|q| q.q1), 4),
            opt(q.map(|q| q.median), 4),
            opt(q.map(|q| q.q3), 4),
            opt(c.agreement_fraction, 3),
            opt(c.histogram_overlap, 3),
            opt(c.mean_true, 4),
            opt(c.mean_estimated, 4),
            c.unmixer_failures
        );
    }
}

fn rate_csv(d: &experiments::RateDiagnostic) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| runtime(e);
    w.write_record(["n", "k_n", "consistency_ratio", "normality_ratio"]).map_err(io)?;
    for r in &d.rows {
        w.write_record([
            r.n.to_string(),
            r.k_n.to_string(),
            r.consistency_ratio.to_string(),
            r.normality_ratio.to_string(),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| runtime(e.to_string()))
}

fn print_rate(d: &experiments::RateDiagnostic) {
    println!(
        "rate diagnostic (gamma_max = {}, c_n = n^{}, tail {}):",
        d.gamma_max, d.c_exponent, d.tail
    );
    for r in &d.rows {
        println!(
            "  n = {:>10}  k_n = {:>8.3}  n^g/c_n = {:.4}  sqrt(k_n) n^g/c_n = {:.4}",
            r.n, r.k_n, r.consistency_ratio, r.normality_ratio
        );
    }
    println!(
        "rate verdict: consistency {}, normality {}",
        d.consistency, d.normality
    );
}

pub fn simulate(args: &SimulateArgs, verbose: bool) -> Result<(), CliError> {
    let mut spec = load_scenario(&args.scenario)?;
    if let Some(r) = args.replications {
        spec.replications = r;
    }
    if let Some(sizes) = &args.sizes {
        spec.sample_sizes = sizes.clone();
    }
    if let Some(seed) = args.seed {
        spec.seed = Seed::new(seed);
    }
    spec.validate().map_err(config)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(&spec.name));
    if verbose {
        eprintln!(
            "running {} x {:?} into {}",
            spec.replications,
            spec.sample_sizes,
            out.display()
        );
    }
    let (summary, records) = experiments::run_study_with_records(&spec).map_err(runtime)?;
    create_dir(&out)?;
    experiments::export_summary(&summary, &out).map_err(runtime)?;
    if args.records {
        experiments::export_records(&records, &out).map_err(runtime)?;
    }
    let resolved = serde_json::to_string_pretty(&spec).map_err(runtime)? + "\n";
    write_file(&out.join("scenario.json"), resolved.as_bytes())?;
    print_summary(&spec, &summary);
    if let Some(rate) = spec.rate {
        let d = experiments::rate_diagnostic(&spec, rate.gamma_max, rate.c_exponent);
        write_file(&out.join("rate.csv"), &rate_csv(&d)?)?;
        print_rate(&d);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_unmixer(s: &str) -> Result<Option<UnmixingMethod>, CliError> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    s.parse().map(Some).map_err(config)
}

fn parse_methods(items: &[String]) -> Result<Vec<Method>, CliError> {
    let methods: Vec<Method> = items
        .iter()
        .map(|m| m.parse().map_err(config))
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(config("no estimator selected"));
    }
    Ok(methods)
}

/// Numeric columns of a CSV with a header; a `date` column is skipped.
fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let file = fs::File::open(path).map_err(|e| config(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(config)?.clone();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !header[i].eq_ignore_ascii_case("date"))
        .collect();
    if keep.is_empty() {
        return Err(config(format!("{}: no value columns", path.display())));
    }
    let names = keep.iter().map(|&i| header[i].to_string()).collect();
    let mut columns = vec![Vec::new(); keep.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(config)?;
        for (c, &i) in keep.iter().enumerate() {
            let v: f64 = record[i].parse().map_err(|_| {
                config(format!(
                    "{} line {}: '{}' is not a number",
                    path.display(),
                    row + 2,
                    &record[i]
                ))
            })?;
            columns[c].push(v);
        }
    }
    Ok((names, columns))
}

#[derive(Serialize)]
struct EstimateRow<'a> {
    name: &'a str,
    #[serde(flatten)]
    estimate: &'a rolling::ComponentEstimate,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    n: usize,
    p: usize,
    columns: &'a [String],
    unmixer: Option<String>,
    tail: TailSpec,
    converged: Option<bool>,
    degenerate_spectrum: Option<bool>,
    /// `Γ̂^{-1}` row by row: entry `[i][k]` is the loading of component `k` on column `i`.
    loadings: Option<Vec<Vec<f64>>>,
    estimates: Vec<EstimateRow<'a>>,
}

pub fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let (names, columns) = read_matrix(&args.input)?;
    let tail: TailSpec = args.tail.parse().map_err(config)?;
    let methods = parse_methods(&args.methods)?;
    let unmixer = if columns.len() < 2 { None } else { parse_unmixer(&args.unmixer)? };
    let n = columns[0].len();
    if n < 2 {
        return Err(config(format!("{}: need at least 2 rows", args.input.display())));
    }
    let result = rolling::estimate_latent(
        &columns,
        unmixer.as_ref().map(|u| u as &dyn Separator),
        &methods,
        &tail,
    )
    .map_err(runtime)?;

    let loadings = result.unmixing.as_ref().and_then(|u| {
        u.gamma_hat
            .clone()
            .try_inverse()
            .map(|l| l.row_iter().map(|r| r.iter().copied().collect()).collect())
    });
    let component_name = |k: usize| {
        if result.unmixing.is_some() {
            format!("component{}", k + 1)
        } else {
            names[k].clone()
        }
    };
    let labels: Vec<String> = (0..columns.len()).map(component_name).collect();
    let report = EstimateReport {
        n,
        p: columns.len(),
        columns: &names,
        unmixer: unmixer.as_ref().map(|u| u.to_string()),
        tail,
        converged: result.unmixing.as_ref().map(|u| u.converged),
        degenerate_spectrum: result.unmixing.as_ref().map(|u| u.degenerate_spectrum),
        loadings,
        estimates: result
            .estimates
            .iter()
            .map(|e| EstimateRow {
                name: &labels[e.component],
                estimate: e,
            })
            .collect(),
    };

    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
    write_file(&args.out.join("estimates.json"), json.as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["component", "name", "estimator", "gamma_hat", "k_n", "clamped", "error"])
        .map_err(runtime)?;
    for row in &report.estimates {
        let e = row.estimate;
        w.write_record([
            (e.component + 1).to_string(),
            row.name.to_string(),
            e.method.to_string(),
            e.gamma_hat.map(|g| g.to_string()).unwrap_or_default(),
            e.k_n.to_string(),
            e.clamped.to_string(),
            e.error.clone().unwrap_or_default(),
        ])
        .map_err(runtime)?;
    }
    write_file(&args.out.join("estimates.csv"), &w.into_inner().map_err(runtime)?)?;

    println!(
        "n = {n}, p = {}, unmixer {}, tail {tail}",
        report.p,
        report.unmixer.as_deref().unwrap_or("none")
    );
    println!("{:>12} {:>7} {:>10} {:>5}", "component", "method", "gamma_hat", "k_n");
    for row in &report.estimates {
        let e = row.estimate;
        println!(
            "{:>12} {:>7} {:>10} {:>5}{}",
            row.name,
            e.method.as_str(),
            opt(e.gamma_hat, 4),
            e.k_n,
            e.error.as_ref().map(|m| format!("  ({m})")).unwrap_or_default()
        );
    }
    if report.degenerate_spectrum == Some(true) {
        println!("warning: nearly equal eigenvalues; components may be mixed");
    }
    Ok(())
}

fn traces_csv(table: &DatedTable, traces: &[(String, RollingEviTrace)]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    rolling::write_traces(&mut buf, Some(&table.dates), traces).map_err(runtime)?;
    Ok(buf)
}

pub fn rolling(args: &RollingArgs) -> Result<(), CliError> {
    let table = DatedTable::from_path(&args.input).map_err(|e| config(format!("{}: {e}", args.input.display())))?;
    let data = match args.input_kind {
        InputKind::Prices => table.to_returns().map_err(config)?,
        InputKind::Returns => table,
    };
    let tails: Vec<TailSide> = args
        .tails
        .iter()
        .map(|t| t.parse().map_err(config))
        .collect::<Result<_, _>>()?;
    let method: Method = args.method.parse().map_err(config)?;
    let factors = parse_unmixer(&args.factors)?;
    let n = data.dates.len();
    if args.k == 0 || args.k >= args.window || args.window > n {
        return Err(config(format!(
            "need 0 < k < window <= n; got k = {}, window = {}, n = {n}",
            args.k, args.window
        )));
    }
    let series: Vec<Vec<f64>> = if args.no_standardize {
        data.columns.clone()
    } else {
        data.columns
            .iter()
            .map(|c| rolling::standardize(c, true))
            .collect::<Result<_, _>>()
            .map_err(runtime)?
    };

    let traces_for = |names: &[String], cols: &[Vec<f64>]| -> Result<Vec<(String, RollingEviTrace)>, CliError> {
        let mut out = Vec::new();
        for (name, col) in names.iter().zip(cols) {
            for &tail in &tails {
                let t = rolling::rolling_evi(col, args.window, args.k, tail, method).map_err(runtime)?;
                out.push((format!("{name}_{tail}"), t));
            }
        }
        Ok(out)
    };

    create_dir(&args.out)?;
    let series_traces = traces_for(&data.names, &series)?;
    write_file(
        &args.out.join("series_traces.csv"),
        &traces_csv(&data, &series_traces)?,
    )?;
    let mut all = series_traces;

    if let (Some(unmixer), true) = (factors, series.len() >= 2) {
        let x = latent_evi::bss::SeriesMatrix::from_columns(&series).map_err(runtime)?;
        let fa = rolling::factor_analysis(&x, &unmixer).map_err(runtime)?;
        let factor_names: Vec<String> = (1..=x.p()).map(|k| format!("factor{k}")).collect();
        let latents = fa.latents.columns();
        let factor_traces = traces_for(&factor_names, &latents)?;
        write_file(
            &args.out.join("factor_traces.csv"),
            &traces_csv(&data, &factor_traces)?,
        )?;
        let mut buf = Vec::new();
        rolling::write_matrix(&mut buf, &data.names, &factor_names, &fa.loadings).map_err(runtime)?;
        write_file(&args.out.join("loadings.csv"), &buf)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["date".to_string()];
        header.extend(factor_names.iter().cloned());
        w.write_record(&header).map_err(runtime)?;
        for (t, d) in data.dates.iter().enumerate() {
            let mut rec = vec![d.to_string()];
            rec.extend(latents.iter().map(|c| c[t].to_string()));
            w.write_record(&rec).map_err(runtime)?;
        }
        write_file(&args.out.join("factors.csv"), &w.into_inner().map_err(runtime)?)?;
        println!("factors: {unmixer}, reconstruction error {:.2e}", fa.reconstruction_error(&x));
        all.extend(factor_traces);
    }

    println!(
        "{} observations, window {}, k {}, {} {} trace(s) of {} windows",
        n,
        args.window,
        args.k,
        all.len(),
        method,
        n - args.window + 1
    );
    for (label, t) in &all {
        let present: Vec<f64> = t.estimates.iter().flatten().copied().collect();
        let (lo, hi) = present
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        println!(
            "  {label:<24} range [{}, {}], {} missing",
            opt(lo.is_finite().then_some(lo), 3),
            opt(hi.is_finite().then_some(hi), 3),
            t.missing()
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn check(args: &CheckArgs) -> Result<(), CliError> {
    let spec = args.scenario.as_deref().map(load_scenario).transpose()?;
    let order_stat: &checks::OrderStatFn = if args.inject_fault {
        &checks::magnitude_sorted_order_statistic
    } else {
        &checks::reference_order_statistic
    };
    let reports = checks::run_all(args.instances, Seed::new(args.seed), order_stat);
    let mut failed = None;
    for r in &reports {
        println!(
            "{:<20} {:>6} instances  {:>5} violations  {}",
            r.name,
            r.instances,
            r.violations,
            if r.passed() { "ok" } else { "VIOLATED" }
        );
        if let (None, Some(c)) = (&failed, &r.counterexample) {
            failed = Some(format!("{}: {c}", r.name));
        }
    }
    if let Some(spec) = spec {
        let rate = spec
            .rate
            .ok_or_else(|| config(format!("scenario {} has no \"rate\" inputs", spec.name)))?;
        print_rate(&experiments::rate_diagnostic(&spec, rate.gamma_max, rate.c_exponent));
    }
    match failed {
        Some(c) => Err(runtime(format!("property violated, counterexample {c}"))),
        None => Ok(()),
    }
}
