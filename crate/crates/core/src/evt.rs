//! Univariate extreme value index estimation from upper order statistics.
//!
//! Order statistics follow the convention `y(n,n) >= ... >= y(1,n)`: index `n`
//! is the sample maximum and index `1` the minimum. Internally samples are sorted
//! ascending, so `y(m,n)` lives at position `m - 1`.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EviError {
    #[error("sample has {0} observations, at least 2 are required")]
    TooFewObservations(usize),
    #[error("sample contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("order statistic index {index} is outside 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("tail size k = {k} is outside 1..={max} for n = {n}")]
    InvalidTailSize { k: usize, n: usize, max: usize },
    #[error("log-moment order must be at least 1")]
    InvalidMomentOrder,
    #[error("threshold order statistic {value} is not strictly positive")]
    PointMassAtZero { value: f64 },
    #[error("degenerate tail: {0}")]
    DegenerateTail(&'static str),
}

/// Estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hill,
    Moment,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hill => "hill",
            Method::Moment => "moment",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hill" => Ok(Method::Hill),
            "moment" => Ok(Method::Moment),
            other => Err(format!("unknown estimator '{other}' (expected hill or moment)")),
        }
    }
}

/// Rule producing the number `k_n` of upper order statistics treated as the tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum TailSpec {
    /// A constant `k`.
    Fixed { k: usize },
    /// `floor(n^exponent)`.
    Power { exponent: f64 },
    /// `floor(sqrt(n))`.
    Sqrt,
    /// `floor(ln n)`.
    Log,
}

impl TailSpec {
    /// Growth exponent of the rule (`k_n ~ n^e`); 0 for fixed and logarithmic rules.
    pub fn growth_exponent(&self) -> f64 {
        match *self {
            TailSpec::Fixed { .. } | TailSpec::Log => 0.0,
            TailSpec::Power { exponent } => exponent,
            TailSpec::Sqrt => 0.5,
        }
    }

    /// Unfloored threshold value, used for rate tables.
    pub fn continuous(&self, n: f64) -> f64 {
        match *self {
            TailSpec::Fixed { k } => k as f64,
            TailSpec::Power { exponent } => n.powf(exponent),
            TailSpec::Sqrt => n.sqrt(),
            TailSpec::Log => n.ln(),
        }
    }
}

impl fmt::Display for TailSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailSpec::Fixed { k } => write!(f, "fixed({k})"),
            TailSpec::Power { exponent } => write!(f, "power({exponent})"),
            TailSpec::Sqrt => f.write_str("sqrt"),
            TailSpec::Log => f.write_str("log"),
        }
    }
}

impl std::str::FromStr for TailSpec {
    type Err = String;

    /// Accepts `sqrt`, `log`, `fixed:K` / a bare integer, and `power:A`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "sqrt" => return Ok(TailSpec::Sqrt),
            "log" => return Ok(TailSpec::Log),
            _ => {}
        }
        if let Ok(k) = s.parse::<usize>() {
            return Ok(TailSpec::Fixed { k });
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            return rest
                .parse::<usize>()
                .map(|k| TailSpec::Fixed { k })
                .map_err(|e| format!("bad fixed tail size '{rest}': {e}"));
        }
        if let Some(rest) = s.strip_prefix("power:") {
            let exponent = parse_fraction(rest)?;
            if !(exponent > 0.0 && exponent < 1.0) {
                return Err(format!("power exponent {exponent} must lie in (0, 1)"));
            }
            return Ok(TailSpec::Power { exponent });
        }
        Err(format!(
            "unknown tail rule '{s}' (expected sqrt, log, fixed:K or power:A)"
        ))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    if let Some((a, b)) = s.split_once('/') {
        let a: f64 = a.trim().parse().map_err(|e| format!("bad numerator '{a}': {e}"))?;
        let b: f64 = b.trim().parse().map_err(|e| format!("bad denominator '{b}': {e}"))?;
        Ok(a / b)
    } else {
        s.trim().parse().map_err(|e| format!("bad number '{s}': {e}"))
    }
}

/// A resolved tail size together with whether clamping to `[1, n-1]` kicked in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    pub k: usize,
    pub clamped: bool,
}

/// Resolves `k_n` for a sample of size `n`, clamping into `[1, n-1]`.
pub fn resolve_threshold(spec: &TailSpec, n: usize) -> Threshold {
    // Guards floor() against powf rounding just below an exact integer (10^4^(1/4)).
    const FLOOR_SLACK: f64 = 1e-9;
    let raw = match *spec {
        TailSpec::Fixed { k } => k as f64,
        TailSpec::Power { exponent } => (n as f64).powf(exponent),
        TailSpec::Sqrt => (n as f64).sqrt(),
        TailSpec::Log => (n as f64).ln(),
    };
    let raw = (raw + FLOOR_SLACK).floor();
    let upper = n.saturating_sub(1).max(1) as f64;
    let k = raw.clamp(1.0, upper);
    Threshold {
        k: k as usize,
        clamped: k != raw,
    }
}

/// Element-wise absolute value; folds the left tail onto the right one.
pub fn abs_values(sample: &[f64]) -> Vec<f64> {
    sample.iter().map(|x| x.abs()).collect()
}

/// Ascending copy of a sample, indexed by the descending-rank convention.
#[derive(Debug, Clone)]
pub struct OrderStatistics {
    sorted: Vec<f64>,
}

impl OrderStatistics {
    pub fn new(sample: &[f64]) -> Result<Self, EviError> {
        if sample.len() < 2 {
            return Err(EviError::TooFewObservations(sample.len()));
        }
        if let Some(i) = sample.iter().position(|x| !x.is_finite()) {
            return Err(EviError::NonFinite(i));
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `y(m,n)`: `m = n` is the maximum, `m = 1` the minimum.
    pub fn get(&self, m: usize) -> Result<f64, EviError> {
        let n = self.sorted.len();
        if m == 0 || m > n {
            return Err(EviError::IndexOutOfRange { index: m, n });
        }
        Ok(self.sorted[m - 1])
    }

    pub fn ascending(&self) -> &[f64] {
        &self.sorted
    }

    /// Log-spacings `ln(y(n-m,n) / y(n-k,n))` for `m = 0..k`.
    fn log_spacings(&self, k: usize) -> Result<impl Iterator<Item = f64> + '_, EviError> {
        let n = self.sorted.len();
        if k == 0 || k >= n {
            return Err(EviError::InvalidTailSize { k, n, max: n - 1 });
        }
        let threshold = self.sorted[n - k - 1];
        if threshold <= 0.0 {
            return Err(EviError::PointMassAtZero { value: threshold });
        }
        Ok(self.sorted[n - k..].iter().map(move |y| (y / threshold).ln()))
    }

    /// `M_n^(j)` over the top `k` order statistics.
    pub fn log_moment(&self, k: usize, j: u32) -> Result<f64, EviError> {
        if j == 0 {
            return Err(EviError::InvalidMomentOrder);
        }
        let exp = i32::try_from(j).map_err(|_| EviError::InvalidMomentOrder)?;
        let sum: f64 = self.log_spacings(k)?.map(|l| l.powi(exp)).sum();
        Ok(sum / k as f64)
    }

    pub fn hill(&self, k: usize) -> Result<f64, EviError> {
        self.log_moment(k, 1)
    }

    pub fn moment(&self, k: usize) -> Result<f64, EviError> {
        let spacings: Vec<f64> = self.log_spacings(k)?.collect();
        let kf = k as f64;
        let m1 = spacings.iter().sum::<f64>() / kf;
        let m2 = spacings.iter().map(|l| l * l).sum::<f64>() / kf;
        if m2 <= 0.0 {
            return Err(EviError::DegenerateTail("second log-moment is zero"));
        }
        // 1 - M1^2/M2 = spread / M2, with the spread taken around M1 to avoid cancellation.
        let spread = spacings.iter().map(|l| (l - m1) * (l - m1)).sum::<f64>() / kf;
        if spread == 0.0 {
            return Err(EviError::DegenerateTail(
                "all tail log-spacings are equal (1 - M1^2/M2 = 0)",
            ));
        }
        Ok(m1 + 1.0 - 0.5 * m2 / spread)
    }

    pub fn estimate(&self, method: Method, spec: &TailSpec) -> Result<EviEstimate, EviError> {
        let threshold = resolve_threshold(spec, self.len());
        let gamma_hat = match method {
            Method::Hill => self.hill(threshold.k)?,
            Method::Moment => self.moment(threshold.k)?,
        };
        Ok(EviEstimate {
            method,
            gamma_hat,
            k_n: threshold.k,
            n: self.len(),
            clamped: threshold.clamped,
        })
    }
}

/// Result of one extreme value index estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EviEstimate {
    pub method: Method,
    pub gamma_hat: f64,
    pub k_n: usize,
    pub n: usize,
    /// Set when the tail rule asked for a `k_n` outside `[1, n-1]`.
    pub clamped: bool,
}

/// `y(m,n)` of a sample; `m = n` is the maximum.
pub fn kth_largest(sample: &[f64], m: usize) -> Result<f64, EviError> {
    OrderStatistics::new(sample)?.get(m)
}

pub fn log_moment(sample: &[f64], k: usize, j: u32) -> Result<f64, EviError> {
    OrderStatistics::new(sample)?.log_moment(k, j)
}

/// Hill estimator: mean log-ratio of the top `k_n` order statistics to `y(n-k_n,n)`.
pub fn hill(sample: &[f64], spec: &TailSpec) -> Result<EviEstimate, EviError> {
    OrderStatistics::new(sample)?.estimate(Method::Hill, spec)
}

/// Moment estimator `M1 + 1 - 1/2 (1 - M1^2/M2)^-1`, valid for every sign of the index.
pub fn moment(sample: &[f64], spec: &TailSpec) -> Result<EviEstimate, EviError> {
    OrderStatistics::new(sample)?.estimate(Method::Moment, spec)
}

pub fn estimate(sample: &[f64], method: Method, spec: &TailSpec) -> Result<EviEstimate, EviError> {
    OrderStatistics::new(sample)?.estimate(method, spec)
}
