//! Rolling-window tail analysis of financial series: log-returns, standardization,
//! latent factor extraction and moving-window extreme value index traces.

use crate::bss::{self, BssError, LagSet, SeriesMatrix, Separator, UnmixingMethod, UnmixingResult};
use crate::evt::{self, Method, OrderStatistics, TailSpec};
use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RollingError {
    #[error("series needs at least {need} observations, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("nonpositive price {value} at row {row}")]
    NonpositivePrice { row: usize, value: f64 },
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("dates must be strictly increasing (row {row}: {date})")]
    UnorderedDates { row: usize, date: NaiveDate },
    #[error("dates and values have different lengths ({dates} vs {values})")]
    LengthMismatch { dates: usize, values: usize },
    #[error("sample variance is zero")]
    ZeroVariance,
    #[error("window {window} and tail size {k} need k < window <= n = {n}")]
    InvalidWindow { window: usize, k: usize, n: usize },
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Bss(#[from] BssError),
}

/// A dated series of strictly positive prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl PriceSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self, RollingError> {
        if dates.len() != values.len() {
            return Err(RollingError::LengthMismatch {
                dates: dates.len(),
                values: values.len(),
            });
        }
        check_dates(&dates)?;
        for (row, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(RollingError::NonFinite(row));
            }
            if value <= 0.0 {
                return Err(RollingError::NonpositivePrice { row, value });
            }
        }
        Ok(Self { dates, values })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_dates(dates: &[NaiveDate]) -> Result<(), RollingError> {
    for (i, w) in dates.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(RollingError::UnorderedDates {
                row: i + 1,
                date: w[1],
            });
        }
    }
    Ok(())
}

/// `r_t = ln(p_{t+1} / p_t)`, one shorter than the price series.
pub fn log_returns(prices: &PriceSeries) -> Result<Vec<f64>, RollingError> {
    log_returns_of(prices.values())
}

/// [`log_returns`] on bare values.
pub fn log_returns_of(prices: &[f64]) -> Result<Vec<f64>, RollingError> {
    if prices.len() < 2 {
        return Err(RollingError::TooShort {
            need: 2,
            got: prices.len(),
        });
    }
    if let Some((row, &value)) = prices.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(RollingError::NonpositivePrice { row, value });
    }
    Ok(prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

/// Rescales to unit sample variance (denominator `n - 1`); with `center` the
/// sample mean is removed first.
pub fn standardize(x: &[f64], center: bool) -> Result<Vec<f64>, RollingError> {
    if x.len() < 2 {
        return Err(RollingError::TooShort {
            need: 2,
            got: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(RollingError::NonFinite(i));
    }
    let mean = crate::stats::mean(x);
    let var = crate::stats::variance(x);
    if !(var > 0.0) {
        return Err(RollingError::ZeroVariance);
    }
    let sd = var.sqrt();
    let shift = if center { mean } else { 0.0 };
    Ok(x.iter().map(|v| (v - shift) / sd).collect())
}

/// Which tail a rolling trace looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSide {
    /// Losses: the estimator is applied to `-x`.
    Left,
    Right,
    /// `|x|`.
    Abs,
}

impl TailSide {
    pub fn as_str(self) -> &'static str {
        match self {
            TailSide::Left => "left",
            TailSide::Right => "right",
            TailSide::Abs => "abs",
        }
    }

    fn transform(self, v: f64) -> f64 {
        match self {
            TailSide::Left => -v,
            TailSide::Right => v,
            TailSide::Abs => v.abs(),
        }
    }
}

impl fmt::Display for TailSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TailSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(TailSide::Left),
            "right" => Ok(TailSide::Right),
            "abs" | "absolute" => Ok(TailSide::Abs),
            other => Err(format!("unknown tail '{other}' (expected left, right or abs)")),
        }
    }
}

/// Moving-window estimates of one series.
///
/// Window `j` covers `x[j .. j + window]` and is reported at
/// `center_index[j] = j + window / 2 - 1` (the 30th observation of a 60-long window).
/// Windows whose threshold order statistic is not positive, or whose tail is
/// otherwise degenerate, carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingEviTrace {
    pub center_index: Vec<usize>,
    pub estimates: Vec<Option<f64>>,
    pub tail: TailSide,
    pub method: Method,
    pub window: usize,
    pub k: usize,
}

impl RollingEviTrace {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn missing(&self) -> usize {
        self.estimates.iter().filter(|e| e.is_none()).count()
    }
}

/// Center index of the window starting at `start`.
pub fn window_center(start: usize, window: usize) -> usize {
    (start + window / 2).saturating_sub(1)
}

fn window_estimate(slice: &[f64], k: usize, tail: TailSide, method: Method) -> Option<f64> {
    let values: Vec<f64> = slice.iter().map(|&v| tail.transform(v)).collect();
    let os = OrderStatistics::new(&values).ok()?;
    match method {
        Method::Hill => os.hill(k),
        Method::Moment => os.moment(k),
    }
    .ok()
}

pub fn rolling_evi(
    x: &[f64],
    window: usize,
    k: usize,
    tail: TailSide,
    method: Method,
) -> Result<RollingEviTrace, RollingError> {
    let n = x.len();
    if k == 0 || k >= window || window > n {
        return Err(RollingError::InvalidWindow { window, k, n });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(RollingError::NonFinite(i));
    }
    let starts = 0..=n - window;
    let one = |j: usize| window_estimate(&x[j..j + window], k, tail, method);
    #[cfg(feature = "parallel")]
    let estimates: Vec<Option<f64>> = {
        use rayon::prelude::*;
        starts.clone().into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let estimates: Vec<Option<f64>> = starts.clone().map(one).collect();
    Ok(RollingEviTrace {
        center_index: starts.map(|j| window_center(j, window)).collect(),
        estimates,
        tail,
        method,
        window,
        k,
    })
}

/// Unmixer used for real-data factor extraction unless overridden.
pub fn default_unmixer() -> UnmixingMethod {
    UnmixingMethod::Sobi {
        lags: LagSet::range(12).expect("1..=12 is a valid lag set"),
    }
}

/// Latent factors of a multivariate series together with their loadings.
#[derive(Debug, Clone)]
pub struct FactorAnalysis {
    /// `ẑ_i = Γ̂ (x_i - x̄)`, one column per factor.
    pub latents: SeriesMatrix,
    /// `Γ̂^{-1}`: column `k` holds the weights of factor `k` in each observed series.
    pub loadings: DMatrix<f64>,
    pub unmixing: UnmixingResult,
}

impl FactorAnalysis {
    /// `max |X - (ẑ L^T + x̄)|`.
    pub fn reconstruction_error(&self, x: &SeriesMatrix) -> f64 {
        let mut recon = self.latents.data() * self.loadings.transpose();
        for mut row in recon.row_iter_mut() {
            row += self.unmixing.sample_mean.transpose();
        }
        crate::linalg::max_abs(&(recon - x.data()))
    }
}

pub fn factor_analysis(x: &SeriesMatrix, unmixer: &dyn Separator) -> Result<FactorAnalysis, RollingError> {
    let unmixing = unmixer.separate(x)?;
    let latents = bss::unmix(x, &unmixing)?;
    let loadings = unmixing
        .gamma_hat
        .clone()
        .try_inverse()
        .ok_or(BssError::Singular)?;
    Ok(FactorAnalysis {
        latents,
        loadings,
        unmixing,
    })
}

/// Whole-sample estimate for one (component, estimator) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEstimate {
    pub component: usize,
    pub method: Method,
    /// `None` when the tail is degenerate; `error` then says why.
    pub gamma_hat: Option<f64>,
    pub k_n: usize,
    pub clamped: bool,
    pub error: Option<String>,
}

/// Latent components and their tail estimates.
#[derive(Debug, Clone)]
pub struct LatentEstimates {
    pub components: Vec<Vec<f64>>,
    pub estimates: Vec<ComponentEstimate>,
    /// Present when an unmixer was applied.
    pub unmixing: Option<UnmixingResult>,
}

/// Estimates the extreme value index of every `|ẑ^k|`.
///
/// With an unmixer the columns are unmixed first (which also centers them);
/// without one they are used exactly as given.
pub fn estimate_latent(
    columns: &[Vec<f64>],
    unmixer: Option<&dyn Separator>,
    methods: &[Method],
    tail: &TailSpec,
) -> Result<LatentEstimates, RollingError> {
    let (components, unmixing) = match unmixer {
        Some(sep) => {
            let x = SeriesMatrix::from_columns(columns)?;
            let res = sep.separate(&x)?;
            (bss::unmix(&x, &res)?.columns(), Some(res))
        }
        None => (columns.to_vec(), None),
    };
    let mut estimates = Vec::new();
    for (component, col) in components.iter().enumerate() {
        let threshold = evt::resolve_threshold(tail, col.len());
        for &method in methods {
            let result = evt::estimate(&evt::abs_values(col), method, tail);
            estimates.push(ComponentEstimate {
                component,
                method,
                gamma_hat: result.as_ref().ok().map(|e| e.gamma_hat),
                k_n: threshold.k,
                clamped: threshold.clamped,
                error: result.err().map(|e| e.to_string()),
            });
        }
    }
    Ok(LatentEstimates {
        components,
        estimates,
        unmixing,
    })
}

/// Columns read from a dated CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatedTable {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    /// One vector per named column, aligned with `dates`.
    pub columns: Vec<Vec<f64>>,
}

impl DatedTable {
    /// Reads a CSV with a header row, one ISO-8601 date column and at least one
    /// numeric column. The date column is the one named `date` (any case), or
    /// the first column when none is.
    pub fn from_reader<R: io::Read>(reader: R) -> Result<Self, RollingError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 {
            return Err(RollingError::Format(
                "need a date column and at least one value column".into(),
            ));
        }
        let date_col = header
            .iter()
            .position(|h| h.eq_ignore_ascii_case("date"))
            .unwrap_or(0);
        let names: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != date_col)
            .map(|(_, h)| h.clone())
            .collect();
        let mut dates = Vec::new();
        let mut columns = vec![Vec::new(); names.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let line = row + 2;
            let date = NaiveDate::parse_from_str(&record[date_col], "%Y-%m-%d").map_err(|e| {
                RollingError::Format(format!("line {line}: bad date '{}': {e}", &record[date_col]))
            })?;
            dates.push(date);
            let mut c = 0;
            for (i, field) in record.iter().enumerate() {
                if i == date_col {
                    continue;
                }
                let v: f64 = field.parse().map_err(|_| {
                    RollingError::Format(format!("line {line}: column '{}' is not a number: '{field}'", names[c]))
                })?;
                columns[c].push(v);
                c += 1;
            }
        }
        check_dates(&dates)?;
        Ok(Self {
            dates,
            names,
            columns,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, RollingError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn price_series(&self, column: usize) -> Result<PriceSeries, RollingError> {
        PriceSeries::new(self.dates.clone(), self.columns[column].clone())
    }

    /// Log-returns of every column, dated by the later day of each pair.
    pub fn to_returns(&self) -> Result<DatedTable, RollingError> {
        let columns = self
            .columns
            .iter()
            .map(|c| log_returns_of(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DatedTable {
            dates: self.dates[1..].to_vec(),
            names: self.names.clone(),
            columns,
        })
    }

    pub fn to_matrix(&self) -> Result<SeriesMatrix, RollingError> {
        Ok(SeriesMatrix::from_columns(&self.columns)?)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes traces sharing one window length side by side:
/// `center_index,date,<label>...`, with empty cells for missing estimates.
/// `date` is omitted when `dates` is `None`.
pub fn write_traces<W: io::Write>(
    writer: W,
    dates: Option<&[NaiveDate]>,
    traces: &[(String, RollingEviTrace)],
) -> Result<(), RollingError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["center_index".to_string()];
    if dates.is_some() {
        header.push("date".into());
    }
    header.extend(traces.iter().map(|(label, _)| label.clone()));
    w.write_record(&header)?;
    let Some((_, first)) = traces.first() else {
        w.flush()?;
        return Ok(());
    };
    if traces.iter().any(|(_, t)| t.center_index != first.center_index) {
        return Err(RollingError::Format("traces have different window grids".into()));
    }
    for (row, &c) in first.center_index.iter().enumerate() {
        let mut record = vec![c.to_string()];
        if let Some(d) = dates {
            record.push(d.get(c).map(|d| d.to_string()).unwrap_or_default());
        }
        record.extend(traces.iter().map(|(_, t)| fmt_opt(t.estimates[row])));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a labelled matrix: header `series,<col>...`, one row per row label.
pub fn write_matrix<W: io::Write>(
    writer: W,
    row_labels: &[String],
    col_labels: &[String],
    m: &DMatrix<f64>,
) -> Result<(), RollingError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series".to_string()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in row_labels.iter().enumerate() {
        let mut record = vec![label.clone()];
        record.extend((0..m.ncols()).map(|j| m[(i, j)].to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::Seed;
    use rand::Rng;

    fn day(i: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64)
    }

    #[test]
    fn log_return_hand_values() {
        assert_eq!(log_returns_of(&[1.0, std::f64::consts::E]).unwrap(), vec![1.0]);
        assert_eq!(log_returns_of(&[3.0; 5]).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            log_returns_of(&[1.0, 0.0, 2.0]),
            Err(RollingError::NonpositivePrice { row: 1, .. })
        ));
        assert!(log_returns_of(&[1.0]).is_err());
    }

    #[test]
    fn log_returns_match_difference_of_logs() {
        let mut rng = Seed::new(3).rng(0, 0);
        let p: Vec<f64> = (0..500).map(|_| rng.random_range(0.5..200.0)).collect();
        let r = log_returns_of(&p).unwrap();
        for (t, v) in r.iter().enumerate() {
            assert!((v - (p[t + 1].ln() - p[t].ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn price_series_invariants() {
        assert!(PriceSeries::new(vec![day(0), day(1)], vec![1.0, 2.0]).is_ok());
        assert!(PriceSeries::new(vec![day(1), day(1)], vec![1.0, 2.0]).is_err());
        assert!(PriceSeries::new(vec![day(0), day(1)], vec![1.0, -2.0]).is_err());
        assert!(PriceSeries::new(vec![day(0)], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn standardize_properties() {
        let out = standardize(&[-1.0, 1.0], true).unwrap();
        assert!((crate::stats::variance(&out) - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] + h).abs() < 1e-15 && (out[1] - h).abs() < 1e-15);

        let mut rng = Seed::new(4).rng(0, 0);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..5.0)).collect();
        let z = standardize(&x, true).unwrap();
        assert!((crate::stats::variance(&z) - 1.0).abs() < 1e-12);
        let again = standardize(&z, true).unwrap();
        assert!(z.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-12));
        let scaled: Vec<f64> = x.iter().map(|v| 7.5 * v).collect();
        let zs = standardize(&scaled, true).unwrap();
        assert!(z.iter().zip(&zs).all(|(a, b)| (a - b).abs() < 1e-12));
        let unc = standardize(&x, false).unwrap();
        assert!((crate::stats::mean(&unc) - crate::stats::mean(&x) / crate::stats::variance(&x).sqrt()).abs() < 1e-12);
        assert!(matches!(standardize(&[2.0; 4], true), Err(RollingError::ZeroVariance)));
    }

    #[test]
    fn full_window_matches_global_estimator() {
        let mut rng = Seed::new(5).rng(0, 0);
        let x: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
        for method in [Method::Hill, Method::Moment] {
            let t = rolling_evi(&x, x.len(), 16, TailSide::Abs, method).unwrap();
            assert_eq!(t.len(), 1);
            assert_eq!(t.center_index, vec![59]);
            let global = evt::estimate(&evt::abs_values(&x), method, &TailSpec::Fixed { k: 16 }).unwrap();
            assert_eq!(t.estimates[0], Some(global.gamma_hat));
        }
    }

    #[test]
    fn trace_shape_and_negation_symmetry() {
        let mut rng = Seed::new(6).rng(0, 0);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-2.0..2.0)).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let left = rolling_evi(&x, 60, 16, TailSide::Left, Method::Hill).unwrap();
        let right = rolling_evi(&neg, 60, 16, TailSide::Right, Method::Hill).unwrap();
        assert_eq!(left, RollingEviTrace { tail: TailSide::Left, ..right });
        assert_eq!(left.len(), 300 - 60 + 1);
        assert_eq!(left.center_index[0], 29);
        assert_eq!(*left.center_index.last().unwrap(), 240 + 29);
    }

    #[test]
    fn constant_window_is_missing() {
        let mut x = vec![1.5; 60];
        x.extend((0..60).map(|i| 1.0 + i as f64 / 10.0));
        let t = rolling_evi(&x, 60, 16, TailSide::Right, Method::Moment).unwrap();
        assert_eq!(t.estimates[0], None);
        assert!(t.estimates.last().unwrap().is_some());
        // Negative threshold in the right tail.
        let t = rolling_evi(&vec![-1.0; 80], 60, 16, TailSide::Right, Method::Hill).unwrap();
        assert_eq!(t.missing(), t.len());
    }

    #[test]
    fn rolling_parameter_errors() {
        let x = vec![1.0; 50];
        assert!(rolling_evi(&x, 60, 16, TailSide::Abs, Method::Hill).is_err());
        assert!(rolling_evi(&x, 20, 20, TailSide::Abs, Method::Hill).is_err());
        assert!(rolling_evi(&x, 20, 0, TailSide::Abs, Method::Hill).is_err());
    }

    #[test]
    fn factor_analysis_identity_and_reconstruction() {
        struct Identity;
        impl Separator for Identity {
            fn separate(&self, x: &SeriesMatrix) -> Result<UnmixingResult, BssError> {
                let p = x.p();
                Ok(UnmixingResult {
                    gamma_hat: DMatrix::identity(p, p),
                    whitener: DMatrix::identity(p, p),
                    sample_mean: nalgebra::DVector::zeros(p),
                    method: UnmixingMethod::Fobi,
                    eigenvalue_gaps: nalgebra::DVector::zeros(p),
                    degenerate_spectrum: false,
                    converged: true,
                })
            }
        }
        let mut rng = Seed::new(8).rng(0, 0);
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..400).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = SeriesMatrix::from_columns(&cols).unwrap();
        let fa = factor_analysis(&x, &Identity).unwrap();
        assert_eq!(fa.loadings, DMatrix::identity(3, 3));
        let fa = factor_analysis(&x, &default_unmixer()).unwrap();
        assert!(fa.reconstruction_error(&x) < 1e-8);
    }

    #[test]
    fn table_ingest_and_outputs() {
        let text = "close_a,date,close_b\n10,2021-01-04,5\n11,2021-01-05,5.5\n12.1,2021-01-06,5\n";
        let t = DatedTable::from_reader(text.as_bytes()).unwrap();
        assert_eq!(t.names, vec!["close_a", "close_b"]);
        assert_eq!(t.dates[2], NaiveDate::from_ymd_opt(2021, 1, 6).unwrap());
        let r = t.to_returns().unwrap();
        assert_eq!(r.dates.len(), 2);
        assert!((r.columns[0][1] - 1.1f64.ln()).abs() < 1e-15);

        assert!(DatedTable::from_reader("date,a\n2021-01-02,1\n2021-01-01,2\n".as_bytes()).is_err());
        assert!(DatedTable::from_reader("date,a\n2021-13-02,1\n".as_bytes()).is_err());
        assert!(DatedTable::from_reader("date,a\n2021-01-02,x\n".as_bytes()).is_err());

        let trace = RollingEviTrace {
            center_index: vec![0, 1],
            estimates: vec![Some(0.25), None],
            tail: TailSide::Left,
            method: Method::Hill,
            window: 2,
            k: 1,
        };
        let mut buf = Vec::new();
        write_traces(&mut buf, Some(&t.dates), &[("a_left".into(), trace)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "center_index,date,a_left\n0,2021-01-04,0.25\n1,2021-01-05,\n"
        );
    }
}
