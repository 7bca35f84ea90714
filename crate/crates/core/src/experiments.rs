//! Monte Carlo driver comparing extreme value index estimates computed from the
//! true latent components with those computed from blind source separation
//! estimates of them.
//!
//! One replicate: draw the latent matrix `Z`, center it, draw a mixing matrix
//! `Ω`, form `x_i = Ω z_i`, unmix, and estimate the index of every `|z^k|` and
//! `|ẑ^k|`. The largest of the per-component estimates is kept on each side, as
//! that targets the heaviest-tailed source.

use crate::bss::{self, SeriesMatrix, Separator, UnmixingMethod};
use crate::evt::{self, Method, OrderStatistics, TailSpec};
use crate::simulate::{self, GeneratorSpec, Seed, SimError};
use crate::stats::quantile_sorted;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed summary file: {0}")]
    Parse(String),
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
}

/// How the mixing matrix of each replicate is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MixingSpec {
    /// i.i.d. Uniform(lo, hi) entries, redrawn above `max_condition`.
    Uniform { lo: f64, hi: f64, max_condition: f64 },
    /// `Ω = I`.
    Identity,
}

impl Default for MixingSpec {
    fn default() -> Self {
        MixingSpec::Uniform {
            lo: -100.0,
            hi: 100.0,
            max_condition: 1e6,
        }
    }
}

/// Fixed-width histogram range; values below `lo` or at/above `hi` are counted apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            lo: -2.0,
            hi: 2.0,
            width: 0.05,
        }
    }
}

impl HistogramSpec {
    pub fn bins(&self) -> usize {
        ((self.hi - self.lo) / self.width).round() as usize
    }
}

/// Theoretical rate inputs for [`rate_diagnostic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateInputs {
    /// Extreme value index of the heaviest latent component.
    pub gamma_max: f64,
    /// Exponent `a` of the unmixing convergence rate `c_n = n^a`.
    pub c_exponent: f64,
}

fn default_estimators() -> Vec<Method> {
    vec![Method::Hill, Method::Moment]
}

fn default_epsilon() -> f64 {
    0.05
}

/// A full simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub components: Vec<GeneratorSpec>,
    pub unmixer: UnmixingMethod,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub tail: TailSpec,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Method>,
    pub seed: Seed,
    #[serde(default)]
    pub mixing: MixingSpec,
    #[serde(default)]
    pub histogram: HistogramSpec,
    /// Threshold on `|γ̂(|z|) - γ̂(|ẑ|)|` for the agreement fraction.
    #[serde(default = "default_epsilon")]
    pub agreement_epsilon: f64,
    /// Random stream index of each component; defaults to its position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_streams: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<RateInputs>,
}

/// Stream index reserved for the mixing matrix within each replicate.
const MIXING_STREAM: u64 = simulate::COMPONENT_STREAMS - 1;

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn p(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidSpec(m));
        let p = self.p();
        if p < 2 {
            return bad(format!("need at least 2 components, got {p}"));
        }
        for c in &self.components {
            c.validate()?;
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.sample_sizes.is_empty() {
            return bad("sample_sizes is empty".into());
        }
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n < 4 * p) {
            return bad(format!("sample size {n} is below 4 * p = {}", 4 * p));
        }
        if self.estimators.is_empty() {
            return bad("no estimators selected".into());
        }
        match self.tail {
            TailSpec::Fixed { k: 0 } => return bad("fixed tail size must be positive".into()),
            TailSpec::Power { exponent } if !(exponent > 0.0 && exponent < 1.0) => {
                return bad(format!("power exponent {exponent} must lie in (0, 1)"))
            }
            _ => {}
        }
        let h = self.histogram;
        if !(h.width > 0.0 && h.lo < h.hi) || h.bins() == 0 {
            return bad("histogram needs lo < hi and a positive width".into());
        }
        if !(self.agreement_epsilon > 0.0) {
            return bad("agreement_epsilon must be positive".into());
        }
        if let MixingSpec::Uniform {
            lo,
            hi,
            max_condition,
        } = self.mixing
        {
            if !(lo < hi) || !(max_condition > 1.0) {
                return bad("mixing needs lo < hi and max_condition > 1".into());
            }
        }
        if let Some(streams) = &self.component_streams {
            if streams.len() != p {
                return bad(format!("component_streams has {} entries for {p} components", streams.len()));
            }
            let mut sorted = streams.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != p || sorted.iter().any(|&s| s >= MIXING_STREAM) {
                return bad("component_streams must be distinct and below 65535".into());
            }
        }
        match &self.unmixer {
            UnmixingMethod::Amuse { lag } if *lag == 0 => bad("AMUSE lag must be positive".into()),
            UnmixingMethod::Amuse { lag } if self.sample_sizes.iter().any(|&n| *lag >= n) => {
                bad("AMUSE lag exceeds a sample size".into())
            }
            UnmixingMethod::Sobi { lags } if self.sample_sizes.iter().any(|&n| lags.max() >= n) => {
                bad("SOBI lag exceeds a sample size".into())
            }
            _ => Ok(()),
        }
    }

    fn stream(&self, component: usize) -> u64 {
        self.component_streams
            .as_ref()
            .map_or(component as u64, |s| s[component])
    }

    /// Root seed used for all replicates at sample size `n`.
    pub fn seed_for(&self, n: usize) -> Seed {
        self.seed.derive(n as u64)
    }
}

/// Per-estimator outcome of one replicate. `None` marks a degenerate estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub method: Method,
    pub true_components: Vec<Option<f64>>,
    pub estimated_components: Vec<Option<f64>>,
    pub max_true: Option<f64>,
    pub max_estimated: Option<f64>,
}

impl EstimatorRecord {
    /// `|γ̂(|z|) - γ̂(|ẑ|)|` when both sides are available.
    pub fn abs_diff(&self) -> Option<f64> {
        Some((self.max_true? - self.max_estimated?).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub replicate: usize,
    pub k_n: usize,
    pub estimators: Vec<EstimatorRecord>,
    pub md_index: Option<f64>,
    pub converged: bool,
    pub degenerate_spectrum: bool,
    pub mixing_draws: usize,
    /// Set when the unmixer failed; estimated-side values are then all missing.
    pub unmixer_error: Option<String>,
}

impl ReplicationRecord {
    pub fn estimator(&self, method: Method) -> Option<&EstimatorRecord> {
        self.estimators.iter().find(|e| e.method == method)
    }
}

fn component_estimates(columns: &[Vec<f64>], method: Method, tail: &TailSpec) -> Vec<Option<f64>> {
    columns
        .iter()
        .map(|c| {
            OrderStatistics::new(&evt::abs_values(c))
                .and_then(|os| os.estimate(method, tail))
                .ok()
                .map(|e| e.gamma_hat)
        })
        .collect()
}

fn max_present(values: &[Option<f64>]) -> Option<f64> {
    values.iter().flatten().copied().reduce(f64::max)
}

/// One replicate with the scenario's own unmixer.
pub fn run_replication(
    spec: &ScenarioSpec,
    n: usize,
    replicate: usize,
) -> Result<ReplicationRecord, ExperimentError> {
    run_replication_with(spec, n, replicate, &spec.unmixer)
}

/// One replicate with an arbitrary separator; a deterministic function of
/// `(spec, n, replicate)`.
pub fn run_replication_with(
    spec: &ScenarioSpec,
    n: usize,
    replicate: usize,
    separator: &dyn Separator,
) -> Result<ReplicationRecord, ExperimentError> {
    let p = spec.p();
    let seed = spec.seed_for(n);
    let r = replicate as u64;
    let raw: Vec<Vec<f64>> = spec
        .components
        .iter()
        .enumerate()
        .map(|(k, g)| g.sample_seeded(n, &seed, r, spec.stream(k)))
        .collect::<Result<_, _>>()?;
    let z = SeriesMatrix::from_columns(&raw)
        .map_err(|e| ExperimentError::InvalidSpec(format!("latent matrix: {e}")))?;
    let (z, _) = bss::center(&z);

    let (omega, mixing_draws) = match spec.mixing {
        MixingSpec::Identity => (DMatrix::identity(p, p), 0),
        MixingSpec::Uniform {
            lo,
            hi,
            max_condition,
        } => {
            let mut rng = seed.rng(r, MIXING_STREAM);
            let m = simulate::random_mixing_matrix(p, lo, hi, max_condition, &mut rng)?;
            (m.matrix, m.draws)
        }
    };

    let k_n = evt::resolve_threshold(&spec.tail, n).k;
    let true_columns = z.columns();

    let separated = z
        .transform(&omega)
        .and_then(|x| separator.separate(&x).map(|res| (x, res)))
        .and_then(|(x, res)| bss::unmix(&x, &res).map(|zh| (res, zh)));

    let (estimated_columns, md_index, converged, degenerate, unmixer_error) = match separated {
        Ok((res, zh)) => {
            let md = bss::align_components(&res.gamma_hat, &omega)
                .ok()
                .map(|a| a.md_index);
            (Some(zh.columns()), md, res.converged, res.degenerate_spectrum, None)
        }
        Err(e) => (None, None, false, false, Some(e.to_string())),
    };

    let estimators = spec
        .estimators
        .iter()
        .map(|&method| {
            let true_components = component_estimates(&true_columns, method, &spec.tail);
            let estimated_components = match &estimated_columns {
                Some(cols) => component_estimates(cols, method, &spec.tail),
                None => vec![None; p],
            };
            EstimatorRecord {
                method,
                max_true: max_present(&true_components),
                max_estimated: max_present(&estimated_components),
                true_components,
                estimated_components,
            }
        })
        .collect();

    Ok(ReplicationRecord {
        n,
        replicate,
        k_n,
        estimators,
        md_index,
        converged,
        degenerate_spectrum: degenerate,
        mixing_draws,
        unmixer_error,
    })
}

/// All replicates at one sample size, in replicate order.
pub fn run_replications(
    spec: &ScenarioSpec,
    n: usize,
    separator: &dyn Separator,
) -> Result<Vec<ReplicationRecord>, ExperimentError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..spec.replications)
            .into_par_iter()
            .map(|r| run_replication_with(spec, n, r, separator))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..spec.replications)
            .map(|r| run_replication_with(spec, n, r, separator))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
        })
    }
}

/// Paired histograms of the max-of-components estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub true_counts: Vec<u64>,
    pub estimated_counts: Vec<u64>,
}

impl Histogram {
    pub fn empty(spec: &HistogramSpec) -> Self {
        Self {
            lo: spec.lo,
            width: spec.width,
            true_counts: vec![0; spec.bins()],
            estimated_counts: vec![0; spec.bins()],
        }
    }

    pub fn bins(&self) -> usize {
        self.true_counts.len()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        (
            self.lo + i as f64 * self.width,
            self.lo + (i + 1) as f64 * self.width,
        )
    }

    /// Bin index, or `Err(true)` below the range and `Err(false)` above it.
    fn locate(&self, v: f64) -> Result<usize, bool> {
        if v < self.lo {
            return Err(true);
        }
        let i = ((v - self.lo) / self.width).floor() as usize;
        if i >= self.bins() {
            Err(false)
        } else {
            Ok(i)
        }
    }

    /// Shared mass `Σ min(a_b, b_b)` over the larger of the two in-range totals.
    pub fn overlap(&self) -> Option<f64> {
        let total_t: u64 = self.true_counts.iter().sum();
        let total_e: u64 = self.estimated_counts.iter().sum();
        let denom = total_t.max(total_e);
        if denom == 0 {
            return None;
        }
        let shared: u64 = self
            .true_counts
            .iter()
            .zip(&self.estimated_counts)
            .map(|(a, b)| *a.min(b))
            .sum();
        Some(shared as f64 / denom as f64)
    }

    fn mode(&self, counts: &[u64]) -> Option<f64> {
        let (i, &c) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        (c > 0).then_some(self.lo + (i as f64 + 0.5) * self.width)
    }

    /// Center of the most populated bin of the true-latent histogram.
    pub fn mode_true(&self) -> Option<f64> {
        self.mode(&self.true_counts)
    }

    pub fn mode_estimated(&self) -> Option<f64> {
        self.mode(&self.estimated_counts)
    }
}

/// Aggregates for one `(n, estimator)` cell of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n: usize,
    pub method: Method,
    pub k_n: usize,
    pub replications: usize,
    /// Replicates where both max-estimates exist.
    pub valid_pairs: usize,
    /// Quartiles of `sqrt(k_n) |γ̂(|z|) - γ̂(|ẑ|)|` over the valid pairs.
    pub scaled_diff: Option<Quartiles>,
    /// Fraction of valid pairs with `|diff| < agreement_epsilon`.
    pub agreement_fraction: Option<f64>,
    pub histogram_overlap: Option<f64>,
    pub mean_true: Option<f64>,
    pub mean_estimated: Option<f64>,
    pub missing_true: usize,
    pub missing_estimated: usize,
    pub below_true: usize,
    pub below_estimated: usize,
    pub above_true: usize,
    pub above_estimated: usize,
    pub unmixer_failures: usize,
    pub nonconverged: usize,
    pub median_md_index: Option<f64>,
    pub histogram: Histogram,
}

/// Study results, ordered by sample size then estimator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudySummary {
    pub cells: Vec<CellSummary>,
}

impl StudySummary {
    pub fn cell(&self, n: usize, method: Method) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.n == n && c.method == method)
    }
}

fn mean_of(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Summarizes the replicates of one sample size for one estimator.
pub fn summarize_cell(
    spec: &ScenarioSpec,
    n: usize,
    method: Method,
    records: &[ReplicationRecord],
) -> CellSummary {
    let k_n = evt::resolve_threshold(&spec.tail, n).k;
    let scale = (k_n as f64).sqrt();
    let mut histogram = Histogram::empty(&spec.histogram);
    let mut diffs = Vec::new();
    let mut agree = 0usize;
    let (mut trues, mut ests) = (Vec::new(), Vec::new());
    let mut cell = CellSummary {
        n,
        method,
        k_n,
        replications: records.len(),
        valid_pairs: 0,
        scaled_diff: None,
        agreement_fraction: None,
        histogram_overlap: None,
        mean_true: None,
        mean_estimated: None,
        missing_true: 0,
        missing_estimated: 0,
        below_true: 0,
        below_estimated: 0,
        above_true: 0,
        above_estimated: 0,
        unmixer_failures: 0,
        nonconverged: 0,
        median_md_index: None,
        histogram: Histogram::empty(&spec.histogram),
    };
    let mut md = Vec::new();
    for rec in records {
        if rec.unmixer_error.is_some() {
            cell.unmixer_failures += 1;
        } else if !rec.converged {
            cell.nonconverged += 1;
        }
        md.extend(rec.md_index);
        let Some(est) = rec.estimator(method) else {
            cell.missing_true += 1;
            cell.missing_estimated += 1;
            continue;
        };
        match est.max_true {
            Some(v) => {
                trues.push(v);
                match histogram.locate(v) {
                    Ok(i) => histogram.true_counts[i] += 1,
                    Err(true) => cell.below_true += 1,
                    Err(false) => cell.above_true += 1,
                }
            }
            None => cell.missing_true += 1,
        }
        match est.max_estimated {
            Some(v) => {
                ests.push(v);
                match histogram.locate(v) {
                    Ok(i) => histogram.estimated_counts[i] += 1,
                    Err(true) => cell.below_estimated += 1,
                    Err(false) => cell.above_estimated += 1,
                }
            }
            None => cell.missing_estimated += 1,
        }
        if let Some(d) = est.abs_diff() {
            diffs.push(scale * d);
            if d < spec.agreement_epsilon {
                agree += 1;
            }
        }
    }
    cell.valid_pairs = diffs.len();
    cell.scaled_diff = Quartiles::of(&diffs);
    cell.agreement_fraction = (!diffs.is_empty()).then(|| agree as f64 / diffs.len() as f64);
    cell.histogram_overlap = histogram.overlap();
    cell.mean_true = mean_of(&trues);
    cell.mean_estimated = mean_of(&ests);
    cell.median_md_index = Quartiles::of(&md).map(|q| q.median);
    cell.histogram = histogram;
    cell
}

/// Full study: every sample size and estimator of the scenario.
pub fn run_study(spec: &ScenarioSpec) -> Result<StudySummary, ExperimentError> {
    run_study_with_records(spec).map(|(s, _)| s)
}

/// [`run_study`] that also hands back every replicate record.
pub fn run_study_with_records(
    spec: &ScenarioSpec,
) -> Result<(StudySummary, Vec<ReplicationRecord>), ExperimentError> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut all = Vec::new();
    for &n in &spec.sample_sizes {
        let records = run_replications(spec, n, &spec.unmixer)?;
        for &method in &spec.estimators {
            cells.push(summarize_cell(spec, n, method, &records));
        }
        all.extend(records);
    }
    Ok((StudySummary { cells }, all))
}

/// One grid point of a [`RateDiagnostic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: f64,
    /// Unfloored `k_n` of the tail rule.
    pub k_n: f64,
    /// `n^γ_max / c_n`.
    pub consistency_ratio: f64,
    /// `sqrt(k_n) n^γ_max / c_n`.
    pub normality_ratio: f64,
}

/// Checks the rate conditions `max g / c_n -> 0` and `sqrt(k_n) max g / c_n -> 0`
/// on a grid, with `max g = n^γ_max` and `c_n = n^a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDiagnostic {
    pub gamma_max: f64,
    pub c_exponent: f64,
    pub tail: TailSpec,
    pub rows: Vec<RateRow>,
    pub consistency: bool,
    pub normality: bool,
}

/// Grid used when a scenario lists fewer than two sample sizes.
pub const DEFAULT_RATE_GRID: [usize; 6] = [300, 1_000, 10_000, 100_000, 1_000_000, 10_000_000];

fn decreasing_below_one(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0]) && values.last().is_some_and(|v| *v < 1.0)
}

/// Rate table for the scenario's tail rule and sample sizes.
pub fn rate_diagnostic(spec: &ScenarioSpec, gamma_max: f64, c_exponent: f64) -> RateDiagnostic {
    rate_diagnostic_on(&spec.sample_sizes, &spec.tail, gamma_max, c_exponent)
}

/// A verdict holds iff its ratio strictly decreases over the grid and ends below 1.
pub fn rate_diagnostic_on(
    grid: &[usize],
    tail: &TailSpec,
    gamma_max: f64,
    c_exponent: f64,
) -> RateDiagnostic {
    let mut grid: Vec<usize> = if grid.len() < 2 {
        DEFAULT_RATE_GRID.to_vec()
    } else {
        grid.to_vec()
    };
    grid.sort_unstable();
    grid.dedup();
    let rows: Vec<RateRow> = grid
        .iter()
        .map(|&n| {
            let nf = n as f64;
            let k_n = tail.continuous(nf);
            let consistency_ratio = nf.powf(gamma_max - c_exponent);
            RateRow {
                n: nf,
                k_n,
                consistency_ratio,
                normality_ratio: k_n.sqrt() * consistency_ratio,
            }
        })
        .collect();
    let cons: Vec<f64> = rows.iter().map(|r| r.consistency_ratio).collect();
    let norm: Vec<f64> = rows.iter().map(|r| r.normality_ratio).collect();
    RateDiagnostic {
        gamma_max,
        c_exponent,
        tail: *tail,
        consistency: decreasing_below_one(&cons),
        normality: decreasing_below_one(&norm),
        rows,
    }
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const HISTOGRAM_FILE: &str = "histograms.csv";
pub const RECORDS_FILE: &str = "records.csv";

const SUMMARY_HEADER: [&str; 4] = ["n", "estimator", "statistic", "value"];
const HISTOGRAM_HEADER: [&str; 6] = ["n", "estimator", "bin_lo", "bin_hi", "count_true", "count_estimated"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cell_statistics(c: &CellSummary) -> Vec<(&'static str, String)> {
    let q = c.scaled_diff;
    vec![
        ("k_n", c.k_n.to_string()),
        ("replications", c.replications.to_string()),
        ("valid_pairs", c.valid_pairs.to_string()),
        ("scaled_diff_q1", fmt_opt(q.map(|q| q.q1))),
        ("scaled_diff_median", fmt_opt(q.map(|q| q.median))),
        ("scaled_diff_q3", fmt_opt(q.map(|q| q.q3))),
        ("agreement_fraction", fmt_opt(c.agreement_fraction)),
        ("histogram_overlap", fmt_opt(c.histogram_overlap)),
        ("mean_true", fmt_opt(c.mean_true)),
        ("mean_estimated", fmt_opt(c.mean_estimated)),
        ("missing_true", c.missing_true.to_string()),
        ("missing_estimated", c.missing_estimated.to_string()),
        ("below_true", c.below_true.to_string()),
        ("below_estimated", c.below_estimated.to_string()),
        ("above_true", c.above_true.to_string()),
        ("above_estimated", c.above_estimated.to_string()),
        ("unmixer_failures", c.unmixer_failures.to_string()),
        ("nonconverged", c.nonconverged.to_string()),
        ("median_md_index", fmt_opt(c.median_md_index)),
        ("histogram_lo", c.histogram.lo.to_string()),
        ("histogram_width", c.histogram.width.to_string()),
        ("histogram_bins", c.histogram.bins().to_string()),
    ]
}

/// Writes `summary.csv` (long format: one row per n × estimator × statistic)
/// and `histograms.csv` into `dir`, returning both paths.
///
/// Missing values are empty cells. Floats use shortest round-trip formatting.
pub fn export_summary(
    summary: &StudySummary,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let hist_path = dir.join(HISTOGRAM_FILE);

    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(SUMMARY_HEADER)?;
    for c in &summary.cells {
        for (name, value) in cell_statistics(c) {
            w.write_record([c.n.to_string().as_str(), c.method.as_str(), name, &value])?;
        }
    }
    w.flush().map_err(io_err(&summary_path))?;

    let mut w = csv::Writer::from_path(&hist_path)?;
    w.write_record(HISTOGRAM_HEADER)?;
    for c in &summary.cells {
        let h = &c.histogram;
        for i in 0..h.bins() {
            let (lo, hi) = h.bin_edges(i);
            w.write_record([
                c.n.to_string(),
                c.method.to_string(),
                lo.to_string(),
                hi.to_string(),
                h.true_counts[i].to_string(),
                h.estimated_counts[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&hist_path))?;
    Ok((summary_path, hist_path))
}

/// Writes one row per replicate and estimator.
pub fn export_records(records: &[ReplicationRecord], dir: &Path) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(RECORDS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "n",
        "replicate",
        "estimator",
        "k_n",
        "max_true",
        "max_estimated",
        "md_index",
        "converged",
        "degenerate_spectrum",
    ])?;
    for r in records {
        for e in &r.estimators {
            w.write_record([
                r.n.to_string(),
                r.replicate.to_string(),
                e.method.to_string(),
                r.k_n.to_string(),
                fmt_opt(e.max_true),
                fmt_opt(e.max_estimated),
                fmt_opt(r.md_index),
                r.converged.to_string(),
                r.degenerate_spectrum.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

fn parse_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Parse(msg.into())
}

fn parse_opt(s: &str) -> Result<Option<f64>, ExperimentError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| parse_err(format!("'{s}': {e}")))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| parse_err(format!("'{s}': {e}")))
}

/// Reads back the files written by [`export_summary`].
pub fn import_summary(dir: &Path) -> Result<StudySummary, ExperimentError> {
    let mut stats: BTreeMap<(usize, Method), BTreeMap<String, String>> = BTreeMap::new();
    let mut order: Vec<(usize, Method)> = Vec::new();
    let mut r = csv::Reader::from_path(dir.join(SUMMARY_FILE))?;
    if r.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(parse_err("unexpected summary header"));
    }
    for row in r.records() {
        let row = row?;
        let key = (parse_num(&row[0])?, row[1].parse().map_err(parse_err)?);
        if !stats.contains_key(&key) {
            order.push(key);
        }
        stats
            .entry(key)
            .or_default()
            .insert(row[2].to_string(), row[3].to_string());
    }

    let mut hist: BTreeMap<(usize, Method), (Vec<u64>, Vec<u64>)> = BTreeMap::new();
    let mut r = csv::Reader::from_path(dir.join(HISTOGRAM_FILE))?;
    if r.headers()?.iter().ne(HISTOGRAM_HEADER) {
        return Err(parse_err("unexpected histogram header"));
    }
    for row in r.records() {
        let row = row?;
        let key = (parse_num(&row[0])?, row[1].parse().map_err(parse_err)?);
        let entry = hist.entry(key).or_default();
        entry.0.push(parse_num(&row[4])?);
        entry.1.push(parse_num(&row[5])?);
    }

    let mut cells = Vec::new();
    for key in order {
        let s = &stats[&key];
        let get = |name: &str| {
            s.get(name)
                .map(String::as_str)
                .ok_or_else(|| parse_err(format!("missing statistic {name} for n={}", key.0)))
        };
        let (true_counts, estimated_counts) = hist.remove(&key).unwrap_or_default();
        let bins: usize = parse_num(get("histogram_bins")?)?;
        if true_counts.len() != bins {
            return Err(parse_err(format!(
                "histogram for n={} has {} bins, expected {bins}",
                key.0,
                true_counts.len()
            )));
        }
        let q1 = parse_opt(get("scaled_diff_q1")?)?;
        let median = parse_opt(get("scaled_diff_median")?)?;
        let q3 = parse_opt(get("scaled_diff_q3")?)?;
        cells.push(CellSummary {
            n: key.0,
            method: key.1,
            k_n: parse_num(get("k_n")?)?,
            replications: parse_num(get("replications")?)?,
            valid_pairs: parse_num(get("valid_pairs")?)?,
            scaled_diff: match (q1, median, q3) {
                (Some(q1), Some(median), Some(q3)) => Some(Quartiles { q1, median, q3 }),
                _ => None,
            },
            agreement_fraction: parse_opt(get("agreement_fraction")?)?,
            histogram_overlap: parse_opt(get("histogram_overlap")?)?,
            mean_true: parse_opt(get("mean_true")?)?,
            mean_estimated: parse_opt(get("mean_estimated")?)?,
            missing_true: parse_num(get("missing_true")?)?,
            missing_estimated: parse_num(get("missing_estimated")?)?,
            below_true: parse_num(get("below_true")?)?,
            below_estimated: parse_num(get("below_estimated")?)?,
            above_true: parse_num(get("above_true")?)?,
            above_estimated: parse_num(get("above_estimated")?)?,
            unmixer_failures: parse_num(get("unmixer_failures")?)?,
            nonconverged: parse_num(get("nonconverged")?)?,
            median_md_index: parse_opt(get("median_md_index")?)?,
            histogram: Histogram {
                lo: parse_num(get("histogram_lo")?)?,
                width: parse_num(get("histogram_width")?)?,
                true_counts,
                estimated_counts,
            },
        });
    }
    Ok(StudySummary { cells })
}
