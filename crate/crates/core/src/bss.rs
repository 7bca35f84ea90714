//! Blind source separation for linear instantaneous mixtures `x_i = Ω z_i + μ`.
//!
//! All three estimators share one structure: center and whiten the data, then
//! find an orthogonal rotation `U` that diagonalizes one or more whitened
//! scatter matrices, giving the unmixing matrix `Γ̂ = Uᵀ W`.
//!
//! * [`amuse`]: eigenvectors of one symmetrized lag-τ autocovariance.
//! * [`sobi`]: Jacobi joint diagonalization of several autocovariances.
//! * [`fobi`]: eigenvectors of the fourth-order scatter `E[‖y‖² y yᵀ]`.
//!
//! Sources are identifiable only up to order, sign and scale. Scale is fixed by
//! whitening; [`align_components`] and [`md_index`] measure how close a gain
//! matrix `Γ̂Ω` is to a signed permutation.

use crate::linalg::{self, sorted_symmetric_eigen};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BssError {
    #[error("series matrix is {n}x{p}; need n > p >= 2")]
    InvalidShape { n: usize, p: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("lag {lag} must be smaller than the sample size {n}")]
    LagOutOfRange { lag: usize, n: usize },
    #[error("lag set must be a non-empty strictly increasing list of positive lags")]
    InvalidLagSet,
    #[error("covariance is ill-conditioned (smallest/largest eigenvalue = {ratio:e})")]
    IllConditioned { ratio: f64 },
    #[error("matrix {index} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { index: usize, asymmetry: f64 },
    #[error("joint diagonalization needs at least one matrix of matching size")]
    EmptyFamily,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is singular or numerically singular")]
    Singular,
}

/// `n × p` observations; rows are time points, columns are components.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    data: DMatrix<f64>,
}

impl SeriesMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self, BssError> {
        let (n, p) = data.shape();
        if p < 2 || n <= p {
            return Err(BssError::InvalidShape { n, p });
        }
        for col in 0..p {
            for row in 0..n {
                if !data[(row, col)].is_finite() {
                    return Err(BssError::NonFinite { row, col });
                }
            }
        }
        Ok(Self { data })
    }

    /// Builds a matrix from equally long columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self, BssError> {
        let p = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != n) {
            return Err(BssError::DimensionMismatch {
                expected: n,
                found: bad.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, p, |r, c| columns[c][r]))
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn p(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.data.column(k).iter().copied().collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.p()).map(|k| self.column(k)).collect()
    }

    /// Applies `x_i -> A x_i` to every row, i.e. returns `X Aᵀ`.
    pub fn transform(&self, a: &DMatrix<f64>) -> Result<Self, BssError> {
        if a.ncols() != self.p() {
            return Err(BssError::DimensionMismatch {
                expected: self.p(),
                found: a.ncols(),
            });
        }
        Self::new(&self.data * a.transpose())
    }
}

/// Lags used by SOBI; non-empty and strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LagSet(Vec<usize>);

impl LagSet {
    pub fn new(lags: Vec<usize>) -> Result<Self, BssError> {
        if lags.is_empty() || lags[0] == 0 || lags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BssError::InvalidLagSet);
        }
        Ok(Self(lags))
    }

    /// `{1, ..., max}`.
    pub fn range(max: usize) -> Result<Self, BssError> {
        Self::new((1..=max).collect())
    }

    pub fn lags(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("lag set is non-empty")
    }
}

impl TryFrom<Vec<usize>> for LagSet {
    type Error = BssError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LagSet> for Vec<usize> {
    fn from(l: LagSet) -> Self {
        l.0
    }
}

/// Separation method and its tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum UnmixingMethod {
    Amuse { lag: usize },
    Sobi { lags: LagSet },
    Fobi,
}

impl fmt::Display for UnmixingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnmixingMethod::Amuse { lag } => write!(f, "amuse(lag={lag})"),
            UnmixingMethod::Sobi { lags } => {
                let l: Vec<String> = lags.lags().iter().map(|l| l.to_string()).collect();
                write!(f, "sobi(lags={})", l.join(","))
            }
            UnmixingMethod::Fobi => f.write_str("fobi"),
        }
    }
}

/// Parses `fobi`, `amuse` (lag 1), `amuse:LAG`, `sobi` (lags 1..=12),
/// `sobi:MAX` (lags 1..=MAX) or `sobi:L1,L2,...`.
impl std::str::FromStr for UnmixingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let num = |a: &str| {
            a.trim()
                .parse::<usize>()
                .map_err(|_| format!("'{a}' is not a nonnegative integer"))
        };
        match (name, arg) {
            ("fobi", None) => Ok(UnmixingMethod::Fobi),
            ("amuse", None) => Ok(UnmixingMethod::Amuse { lag: 1 }),
            ("amuse", Some(a)) => Ok(UnmixingMethod::Amuse { lag: num(a)? }),
            ("sobi", None) => Ok(UnmixingMethod::Sobi {
                lags: LagSet::range(12).map_err(|e| e.to_string())?,
            }),
            ("sobi", Some(a)) if !a.contains(',') => Ok(UnmixingMethod::Sobi {
                lags: LagSet::range(num(a)?).map_err(|e| e.to_string())?,
            }),
            ("sobi", Some(a)) => {
                let lags = a.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
                Ok(UnmixingMethod::Sobi {
                    lags: LagSet::new(lags).map_err(|e| e.to_string())?,
                })
            }
            _ => Err(format!(
                "unknown unmixer '{s}' (expected fobi, amuse[:LAG] or sobi[:MAX | :L1,L2,...])"
            )),
        }
    }
}

/// Anything able to produce an unmixing estimate from observations.
pub trait Separator: Sync {
    fn separate(&self, x: &SeriesMatrix) -> Result<UnmixingResult, BssError>;
}

impl Separator for UnmixingMethod {
    fn separate(&self, x: &SeriesMatrix) -> Result<UnmixingResult, BssError> {
        match self {
            UnmixingMethod::Amuse { lag } => amuse(x, *lag),
            UnmixingMethod::Sobi { lags } => sobi(x, lags),
            UnmixingMethod::Fobi => fobi(x),
        }
    }
}

/// Eigenvalue (or diagonal-profile) gaps below this mark the spectrum as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-8;

/// Estimated unmixing transform `ẑ_i = Γ̂ (x_i - x̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixingResult {
    pub gamma_hat: DMatrix<f64>,
    pub whitener: DMatrix<f64>,
    pub sample_mean: DVector<f64>,
    pub method: UnmixingMethod,
    /// Per component, the distance to the nearest other component's eigenvalue
    /// (AMUSE, FOBI) or diagonal profile across lags (SOBI).
    pub eigenvalue_gaps: DVector<f64>,
    /// Some gap fell below [`DEGENERATE_GAP`]; the components are not identifiable.
    pub degenerate_spectrum: bool,
    /// False only when joint diagonalization ran out of sweeps.
    pub converged: bool,
}

/// Subtracts column means.
pub fn center(x: &SeriesMatrix) -> (SeriesMatrix, DVector<f64>) {
    let mean = x.data.row_mean().transpose();
    let mut centered = x.data.clone();
    for (k, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[k]);
    }
    (SeriesMatrix { data: centered }, mean)
}

/// Lag-τ autocovariance `(1/(n-τ)) Σ x_i x_{i+τ}ᵀ` of already-centered data.
///
/// With `symmetrize` the result is `(S + Sᵀ)/2`. `tau = 0` gives the covariance
/// with denominator `n`.
pub fn autocovariance(
    x: &SeriesMatrix,
    tau: usize,
    symmetrize: bool,
) -> Result<DMatrix<f64>, BssError> {
    let n = x.n();
    if tau >= n {
        return Err(BssError::LagOutOfRange { lag: tau, n });
    }
    let m = n - tau;
    let head = x.data.rows(0, m);
    let tail = x.data.rows(tau, m);
    let mut s = head.transpose() * tail;
    s /= m as f64;
    if symmetrize {
        s = (&s + s.transpose()) * 0.5;
    }
    Ok(s)
}

/// Output of [`whiten`].
#[derive(Debug, Clone)]
pub struct Whitening {
    /// Symmetric `Cov^{-1/2}`.
    pub whitener: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// `(x_i - x̄) W` row-wise; identity covariance.
    pub data: SeriesMatrix,
}

/// Minimum smallest/largest covariance eigenvalue ratio accepted by [`whiten`].
pub const MIN_COVARIANCE_RATIO: f64 = 1e-10;

/// Centers and applies the symmetric inverse square root of the covariance.
pub fn whiten(x: &SeriesMatrix) -> Result<Whitening, BssError> {
    let (centered, mean) = center(x);
    let cov = autocovariance(&centered, 0, true)?;
    let (values, vectors) = sorted_symmetric_eigen(&cov);
    let largest = values[0];
    let smallest = values[values.len() - 1];
    if !(largest > 0.0) || smallest <= MIN_COVARIANCE_RATIO * largest {
        let ratio = if largest > 0.0 { smallest / largest } else { 0.0 };
        return Err(BssError::IllConditioned { ratio });
    }
    let inv_sqrt = DMatrix::from_diagonal(&values.map(|v| 1.0 / v.sqrt()));
    let w = &vectors * inv_sqrt * vectors.transpose();
    let w = (&w + w.transpose()) * 0.5;
    let data = SeriesMatrix {
        data: centered.data * &w,
    };
    Ok(Whitening {
        whitener: w,
        mean,
        data,
    })
}

/// Stopping rule for [`joint_diagonalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JdOptions {
    /// Sweeps stop once every Givens angle in a sweep is at most this (radians).
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for JdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_sweeps: 100,
        }
    }
}

/// Output of [`joint_diagonalize`].
#[derive(Debug, Clone)]
pub struct JointDiagonalization {
    /// Orthogonal; `Vᵀ M_k V` is as diagonal as possible for every `k`.
    pub v: DMatrix<f64>,
    pub converged: bool,
    pub sweeps: usize,
    /// `Σ_k off(Vᵀ M_k V)` (sum of squared off-diagonal entries) before the
    /// first sweep and after each sweep.
    pub off_history: Vec<f64>,
    /// The rotated family `Vᵀ M_k V`.
    pub diagonalized: Vec<DMatrix<f64>>,
}

/// Tolerance on `max |M - Mᵀ|` for inputs to [`joint_diagonalize`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Jacobi joint diagonalization by Givens rotations.
///
/// Each pair `(p, q)` gets the closed-form rotation maximizing the summed
/// squared diagonals of the whole family, so the off-diagonal criterion never
/// increases. A single matrix reduces to the cyclic Jacobi eigenvalue method.
pub fn joint_diagonalize(
    matrices: &[DMatrix<f64>],
    opts: JdOptions,
) -> Result<JointDiagonalization, BssError> {
    let first = matrices.first().ok_or(BssError::EmptyFamily)?;
    let p = first.nrows();
    if p == 0 {
        return Err(BssError::EmptyFamily);
    }
    for (index, m) in matrices.iter().enumerate() {
        if m.nrows() != p || m.ncols() != p {
            return Err(BssError::DimensionMismatch {
                expected: p,
                found: m.nrows().max(m.ncols()),
            });
        }
        let asymmetry = linalg::asymmetry(m);
        if !(asymmetry <= SYMMETRY_TOL) {
            return Err(BssError::NotSymmetric { index, asymmetry });
        }
    }

    let mut a: Vec<DMatrix<f64>> = matrices.iter().map(|m| (m + m.transpose()) * 0.5).collect();
    let mut v = DMatrix::<f64>::identity(p, p);
    let off = |a: &[DMatrix<f64>]| a.iter().map(linalg::off_diagonal_sq).sum::<f64>();
    let mut off_history = vec![off(&a)];
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let (mut g11, mut g22, mut g12) = (0.0, 0.0, 0.0);
                for m in &a {
                    let d = m[(i, i)] - m[(j, j)];
                    let o = m[(i, j)] + m[(j, i)];
                    g11 += d * d;
                    g22 += o * o;
                    g12 += d * o;
                }
                let ton = g11 - g22;
                let toff = 2.0 * g12;
                if ton == 0.0 && toff == 0.0 {
                    continue;
                }
                let theta = 0.25 * toff.atan2(ton);
                if theta.abs() <= opts.tol {
                    continue;
                }
                rotated = true;
                let (s, c) = theta.sin_cos();
                for m in a.iter_mut() {
                    rotate_rows(m, i, j, c, s);
                    rotate_cols(m, i, j, c, s);
                }
                rotate_cols(&mut v, i, j, c, s);
            }
        }
        off_history.push(off(&a));
        if !rotated {
            converged = true;
            break;
        }
    }

    Ok(JointDiagonalization {
        v,
        converged,
        sweeps,
        off_history,
        diagonalized: a,
    })
}

fn rotate_rows(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for col in 0..m.ncols() {
        let (x, y) = (m[(i, col)], m[(j, col)]);
        m[(i, col)] = c * x + s * y;
        m[(j, col)] = -s * x + c * y;
    }
}

fn rotate_cols(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let (x, y) = (m[(row, i)], m[(row, j)]);
        m[(row, i)] = c * x + s * y;
        m[(row, j)] = -s * x + c * y;
    }
}

/// Smallest distance from each entry to any other entry.
fn nearest_gaps(profiles: &[Vec<f64>]) -> DVector<f64> {
    let p = profiles.len();
    DVector::from_fn(p, |i, _| {
        (0..p)
            .filter(|&j| j != i)
            .map(|j| {
                profiles[i]
                    .iter()
                    .zip(&profiles[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    })
}

fn eigen_unmixing(
    w: Whitening,
    scatter: &DMatrix<f64>,
    method: UnmixingMethod,
) -> UnmixingResult {
    let (values, vectors) = sorted_symmetric_eigen(scatter);
    let profiles: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
    let gaps = nearest_gaps(&profiles);
    UnmixingResult {
        gamma_hat: vectors.transpose() * &w.whitener,
        degenerate_spectrum: gaps.iter().any(|g| *g < DEGENERATE_GAP),
        eigenvalue_gaps: gaps,
        whitener: w.whitener,
        sample_mean: w.mean,
        method,
        converged: true,
    }
}

/// AMUSE: diagonalizes the symmetrized lag-`lag` autocovariance of whitened data.
pub fn amuse(x: &SeriesMatrix, lag: usize) -> Result<UnmixingResult, BssError> {
    if lag == 0 {
        return Err(BssError::InvalidLagSet);
    }
    if lag >= x.n() {
        return Err(BssError::LagOutOfRange { lag, n: x.n() });
    }
    let w = whiten(x)?;
    let s = autocovariance(&w.data, lag, true)?;
    Ok(eigen_unmixing(w, &s, UnmixingMethod::Amuse { lag }))
}

/// SOBI with the default joint diagonalization settings.
pub fn sobi(x: &SeriesMatrix, lags: &LagSet) -> Result<UnmixingResult, BssError> {
    sobi_with(x, lags, JdOptions::default())
}

/// SOBI: joint diagonalization of whitened symmetrized autocovariances.
///
/// Components are ordered by decreasing sum of squared diagonal entries.
pub fn sobi_with(
    x: &SeriesMatrix,
    lags: &LagSet,
    opts: JdOptions,
) -> Result<UnmixingResult, BssError> {
    if lags.max() >= x.n() {
        return Err(BssError::LagOutOfRange {
            lag: lags.max(),
            n: x.n(),
        });
    }
    let w = whiten(x)?;
    let family = lags
        .lags()
        .iter()
        .map(|&tau| autocovariance(&w.data, tau, true))
        .collect::<Result<Vec<_>, _>>()?;
    let jd = joint_diagonalize(&family, opts)?;
    let p = x.p();
    let profiles: Vec<Vec<f64>> = (0..p)
        .map(|c| jd.diagonalized.iter().map(|d| d[(c, c)]).collect())
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    let strength = |c: usize| profiles[c].iter().map(|d| d * d).sum::<f64>();
    order.sort_by(|&a, &b| strength(b).total_cmp(&strength(a)));
    let v = DMatrix::from_fn(p, p, |r, c| jd.v[(r, order[c])]);
    let profiles: Vec<Vec<f64>> = order.iter().map(|&c| profiles[c].clone()).collect();
    let gaps = nearest_gaps(&profiles);
    Ok(UnmixingResult {
        gamma_hat: v.transpose() * &w.whitener,
        degenerate_spectrum: gaps.iter().any(|g| *g < DEGENERATE_GAP),
        eigenvalue_gaps: gaps,
        whitener: w.whitener,
        sample_mean: w.mean,
        method: UnmixingMethod::Sobi { lags: lags.clone() },
        converged: jd.converged,
    })
}

/// Fourth-order scatter `(1/n) Σ ‖y_i‖² y_i y_iᵀ`.
pub fn fourth_order_scatter(y: &SeriesMatrix) -> DMatrix<f64> {
    let d = y.data();
    let mut weighted = d.clone();
    for (r, mut row) in weighted.row_iter_mut().enumerate() {
        let norm_sq = d.row(r).norm_squared();
        row *= norm_sq;
    }
    let mut b = d.transpose() * weighted;
    b /= d.nrows() as f64;
    (&b + b.transpose()) * 0.5
}

/// FOBI: eigenvectors of the fourth-order scatter of whitened data.
///
/// Needs distinct component kurtoses and finite fourth moments.
pub fn fobi(x: &SeriesMatrix) -> Result<UnmixingResult, BssError> {
    let w = whiten(x)?;
    let b = fourth_order_scatter(&w.data);
    Ok(eigen_unmixing(w, &b, UnmixingMethod::Fobi))
}

/// Row `i` of the output is `Γ̂ (x_i - x̄)`.
pub fn unmix(x: &SeriesMatrix, result: &UnmixingResult) -> Result<SeriesMatrix, BssError> {
    let p = x.p();
    if result.gamma_hat.shape() != (p, p) {
        return Err(BssError::DimensionMismatch {
            expected: p,
            found: result.gamma_hat.nrows(),
        });
    }
    if result.sample_mean.len() != p {
        return Err(BssError::DimensionMismatch {
            expected: p,
            found: result.sample_mean.len(),
        });
    }
    let mut centered = x.data.clone();
    for (k, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-result.sample_mean[k]);
    }
    SeriesMatrix::new(centered * result.gamma_hat.transpose())
}

/// Matching of estimated to true components through the gain matrix `Γ̂Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    /// `permutation[k]` is the true component recovered in estimated row `k`.
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
    pub md_index: f64,
    pub gain: DMatrix<f64>,
}

/// Condition number above which alignment inputs count as singular.
const SINGULAR_CONDITION: f64 = 1e14;

/// Compares an estimated unmixing matrix with the true mixing matrix.
///
/// The permutation is picked greedily on `|G|`: the largest remaining entry
/// wins, ties going to the lowest row and then the lowest column.
pub fn align_components(
    gamma_hat: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> Result<AlignmentReport, BssError> {
    let p = gamma_hat.nrows();
    for m in [gamma_hat, omega] {
        if m.shape() != (p, p) {
            return Err(BssError::DimensionMismatch {
                expected: p,
                found: m.nrows().max(m.ncols()),
            });
        }
        if !(linalg::condition_number(m) < SINGULAR_CONDITION) {
            return Err(BssError::Singular);
        }
    }
    let gain = gamma_hat * omega;
    let mut permutation = vec![usize::MAX; p];
    let mut used_cols = vec![false; p];
    for _ in 0..p {
        let mut best: Option<(usize, usize, f64)> = None;
        for r in (0..p).filter(|&r| permutation[r] == usize::MAX) {
            for c in (0..p).filter(|&c| !used_cols[c]) {
                let v = gain[(r, c)].abs();
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((r, c, v));
                }
            }
        }
        let (r, c, _) = best.expect("unassigned row and column remain");
        permutation[r] = c;
        used_cols[c] = true;
    }
    let signs = (0..p)
        .map(|r| if gain[(r, permutation[r])] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    Ok(AlignmentReport {
        permutation,
        signs,
        md_index: md_index(&gain),
        gain,
    })
}

/// Minimum distance index of a gain matrix.
///
/// `MD(G) = sqrt((p - max_π Σ_k G̃_{k,π(k)}) / (p - 1))` where `G̃` holds the
/// squared entries of `G` normalized to unit row sums. This equals
/// `inf ‖C G - I‖_F / sqrt(p - 1)` over `C = PJD`, lies in `[0, 1]`, and is
/// zero exactly when `G` is a scaled signed permutation.
pub fn md_index(gain: &DMatrix<f64>) -> f64 {
    let p = gain.nrows();
    if p < 2 {
        return 0.0;
    }
    let normalized = row_normalized_squares(gain);
    let best = max_weight_assignment(&normalized)
        .iter()
        .enumerate()
        .map(|(r, &c)| normalized[(r, c)])
        .sum::<f64>();
    ((p as f64 - best).max(0.0) / (p as f64 - 1.0)).sqrt().min(1.0)
}

/// MD index between the sources produced by two unmixing matrices for the same
/// observations, i.e. of `Γ_a Γ_b⁻¹`.
pub fn md_between(gamma_a: &DMatrix<f64>, gamma_b: &DMatrix<f64>) -> Result<f64, BssError> {
    let inv = gamma_b.clone().try_inverse().ok_or(BssError::Singular)?;
    Ok(md_index(&(gamma_a * inv)))
}

pub(crate) fn row_normalized_squares(gain: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sq = gain.map(|v| v * v);
    for mut row in sq.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    sq
}

/// Hungarian algorithm maximizing `Σ_r w[r, π(r)]`; returns `π`.
fn max_weight_assignment(w: &DMatrix<f64>) -> Vec<usize> {
    let n = w.nrows();
    let cost = |r: usize, c: usize| -w[(r, c)];
    // 1-based potentials formulation; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost(r0 - 1, col - 1) - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[matched_row[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched_row[col0] = matched_row[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        if matched_row[col] > 0 {
            assignment[matched_row[col] - 1] = col - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        gaussian_matrix(rng, p, p).qr().q()
    }

    fn permutations(p: usize) -> Vec<Vec<usize>> {
        if p == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for rest in permutations(p - 1) {
            for pos in 0..=rest.len() {
                let mut perm = rest.clone();
                perm.insert(pos, p - 1);
                out.push(perm);
            }
        }
        out
    }

    /// Exhaustive oracle for the MD index straight from `inf ‖C G - I‖`.
    fn md_brute_force(g: &DMatrix<f64>) -> f64 {
        let p = g.nrows();
        let mut best = f64::INFINITY;
        for perm in permutations(p) {
            // Row perm[r] of G is scaled into target row r; the optimal scale
            // leaves 1 - g_{i,r}^2 / ‖g_i‖^2 as the residual.
            let resid: f64 = (0..p)
                .map(|r| {
                    let row = g.row(perm[r]);
                    1.0 - row[r] * row[r] / row.norm_squared()
                })
                .sum();
            best = best.min(resid);
        }
        (best.max(0.0) / (p as f64 - 1.0)).sqrt()
    }

    #[test]
    fn unmixer_from_str() {
        assert_eq!("fobi".parse(), Ok(UnmixingMethod::Fobi));
        assert_eq!("AMUSE".parse(), Ok(UnmixingMethod::Amuse { lag: 1 }));
        assert_eq!("amuse:3".parse(), Ok(UnmixingMethod::Amuse { lag: 3 }));
        assert_eq!(
            "sobi".parse(),
            Ok(UnmixingMethod::Sobi { lags: LagSet::range(12).unwrap() })
        );
        assert_eq!(
            "sobi:1,4".parse(),
            Ok(UnmixingMethod::Sobi { lags: LagSet::new(vec![1, 4]).unwrap() })
        );
        assert!("sobi:0".parse::<UnmixingMethod>().is_err());
        assert!("jade".parse::<UnmixingMethod>().is_err());
    }

    #[test]
    fn series_matrix_shape_checks() {
        assert!(matches!(
            SeriesMatrix::new(DMatrix::zeros(2, 2)),
            Err(BssError::InvalidShape { n: 2, p: 2 })
        ));
        assert!(matches!(
            SeriesMatrix::new(DMatrix::zeros(5, 1)),
            Err(BssError::InvalidShape { .. })
        ));
        let mut m = DMatrix::zeros(4, 2);
        m[(3, 1)] = f64::NAN;
        assert!(matches!(
            SeriesMatrix::new(m),
            Err(BssError::NonFinite { row: 3, col: 1 })
        ));
        assert!(SeriesMatrix::from_columns(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn lag_set_validation() {
        assert!(LagSet::new(vec![]).is_err());
        assert!(LagSet::new(vec![0, 1]).is_err());
        assert!(LagSet::new(vec![2, 2]).is_err());
        assert!(LagSet::new(vec![3, 1]).is_err());
        assert_eq!(LagSet::range(3).unwrap().lags(), &[1, 2, 3]);
        let parsed: LagSet = serde_json::from_str("[1,2,5]").unwrap();
        assert_eq!(parsed.max(), 5);
        assert!(serde_json::from_str::<LagSet>("[2,1]").is_err());
    }

    #[test]
    fn center_examples() {
        let x = SeriesMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]))
            .unwrap();
        let (c, mean) = center(&x);
        assert_eq!(mean.as_slice(), &[2.0, 0.0]);
        assert!(c.data().row_mean().amax() < 1e-12);

        let constant =
            SeriesMatrix::new(DMatrix::from_row_slice(3, 2, &[4.0, -1.0, 4.0, -1.0, 4.0, -1.0]))
                .unwrap();
        let (c, mean) = center(&constant);
        assert_eq!(mean.as_slice(), &[4.0, -1.0]);
        assert!(c.data().iter().all(|v| *v == 0.0));

        let (again, m2) = center(&c);
        assert!((again.data() - c.data()).amax() < 1e-12);
        assert!(m2.amax() < 1e-12);
    }

    #[test]
    fn autocovariance_lag_bounds_and_hand_value() {
        let x = SeriesMatrix::new(DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 2.0, -1.0, 0.0, 0.0, -2.0],
        ))
        .unwrap();
        assert!(matches!(
            autocovariance(&x, 3, false),
            Err(BssError::LagOutOfRange { lag: 3, n: 3 })
        ));
        // S_1 = (x_1 x_2ᵀ + x_2 x_3ᵀ) / 2
        let s = autocovariance(&x, 1, false).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, 0.0]);
        assert!((s - expected).amax() < 1e-15);
        let s = autocovariance(&x, 1, true).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, 0.0]);
        assert!((s - expected).amax() < 1e-15);
    }

    #[test]
    fn autocovariance_of_white_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let x = SeriesMatrix::new(gaussian_matrix(&mut rng, n, 3)).unwrap();
        let (x, _) = center(&x);
        let s = autocovariance(&x, 1, false).unwrap();
        assert!(s.amax() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn whitening_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian_matrix(&mut rng, 500, 4);
        let a = gaussian_matrix(&mut rng, 4, 4);
        let x = SeriesMatrix::new(z * a.transpose()).unwrap();
        let w = whiten(&x).unwrap();
        let cov = autocovariance(&w.data, 0, false).unwrap();
        assert!((cov - DMatrix::identity(4, 4)).amax() < 1e-10);
        assert!(linalg::asymmetry(&w.whitener) < 1e-14);
    }

    #[test]
    fn whitening_identity_and_diagonal_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = SeriesMatrix::new(gaussian_matrix(&mut rng, 400, 2)).unwrap();
        let z = whiten(&raw).unwrap().data;
        let w = whiten(&z).unwrap();
        assert!((&w.whitener - DMatrix::identity(2, 2)).amax() < 1e-10);

        let scaled = z.transform(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])))
            .unwrap();
        let w = whiten(&scaled).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0 / 3.0]));
        assert!((&w.whitener - expected).amax() < 1e-10);
    }

    #[test]
    fn whitening_rejects_collinear_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut z = gaussian_matrix(&mut rng, 200, 3);
        let c0 = z.column(0).clone_owned();
        z.set_column(2, &(c0 * 2.0));
        let err = whiten(&SeriesMatrix::new(z).unwrap()).unwrap_err();
        assert!(matches!(err, BssError::IllConditioned { ratio } if ratio < 1e-10));
    }

    #[test]
    fn jd_single_matrix_is_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = gaussian_matrix(&mut rng, 5, 5);
        let m = &b + b.transpose();
        let jd = joint_diagonalize(std::slice::from_ref(&m), JdOptions::default()).unwrap();
        assert!(jd.converged);
        let d = jd.v.transpose() * &m * &jd.v;
        assert!(linalg::off_diagonal_sq(&d).sqrt() < 1e-10);
        assert!(linalg::orthogonality_defect(&jd.v) < 1e-12);
        // Same spectrum as the library eigensolver.
        let mut mine: Vec<f64> = (0..5).map(|i| d[(i, i)]).collect();
        mine.sort_by(|a, b| b.total_cmp(a));
        let (reference, _) = sorted_symmetric_eigen(&m);
        for (a, b) in mine.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn jd_already_diagonal_family_stays_put() {
        let d1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.5, 4.0]));
        let jd = joint_diagonalize(&[d1, d2], JdOptions::default()).unwrap();
        assert!(jd.converged);
        assert_eq!(jd.sweeps, 1);
        assert!((jd.v - DMatrix::identity(3, 3)).amax() < 1e-15);
        assert!(jd.off_history.last().unwrap() < &1e-24);
    }

    #[test]
    fn jd_recovers_rotation_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = 4;
        let q = random_orthogonal(&mut rng, p);
        let family: Vec<DMatrix<f64>> = (0..3)
            .map(|_| {
                let d = DMatrix::from_diagonal(&DVector::from_fn(p, |_, _| {
                    rng.random_range(-5.0..5.0)
                }));
                &q * d * q.transpose()
            })
            .collect();
        let jd = joint_diagonalize(&family, JdOptions::default()).unwrap();
        assert!(jd.converged);
        assert!(jd.off_history.last().unwrap().sqrt() < 1e-10);
        for w in jd.off_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-28);
        }
        // Vᵀ Q is a signed permutation.
        assert!(md_index(&(jd.v.transpose() * &q)) < 1e-7);
    }

    #[test]
    fn jd_input_errors() {
        assert!(matches!(
            joint_diagonalize(&[], JdOptions::default()),
            Err(BssError::EmptyFamily)
        ));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            joint_diagonalize(&[bad], JdOptions::default()),
            Err(BssError::NotSymmetric { index: 0, .. })
        ));
        let mismatched = [DMatrix::identity(2, 2), DMatrix::identity(3, 3)];
        assert!(matches!(
            joint_diagonalize(&mismatched, JdOptions::default()),
            Err(BssError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn jd_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let family: Vec<DMatrix<f64>> = (0..4)
            .map(|_| {
                let b = gaussian_matrix(&mut rng, 5, 5);
                &b + b.transpose()
            })
            .collect();
        let opts = JdOptions {
            tol: 1e-12,
            max_sweeps: 1,
        };
        let jd = joint_diagonalize(&family, opts).unwrap();
        assert!(!jd.converged);
        assert_eq!(jd.sweeps, 1);
    }

    #[test]
    fn md_index_of_signed_permutations_is_zero() {
        assert_eq!(md_index(&DMatrix::identity(3, 3)), 0.0);
        let pj = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 0.0, 0.0, 1.0, -2.5, 0.0, 0.0]);
        assert_eq!(md_index(&pj), 0.0);
        let report = align_components(&pj, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(report.permutation, vec![1, 2, 0]);
        assert_eq!(report.signs, vec![-1.0, 1.0, -1.0]);
    }

    #[test]
    fn md_index_is_one_for_uniform_rows() {
        let g = DMatrix::from_element(3, 3, 1.0);
        assert!((md_index(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn md_index_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for p in 2..=4 {
            let mut g = DMatrix::identity(p, p);
            for r in 0..p {
                for c in 0..p {
                    if r != c {
                        g[(r, c)] = 0.1;
                    }
                }
            }
            let md = md_index(&g);
            assert!(md > 0.0 && md < 0.3);
            assert!((md - md_brute_force(&g)).abs() < 1e-12);
            for _ in 0..50 {
                let g = gaussian_matrix(&mut rng, p, p);
                assert!((md_index(&g) - md_brute_force(&g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn align_identity_and_errors() {
        let r = align_components(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(r.permutation, vec![0, 1, 2]);
        assert_eq!(r.signs, vec![1.0; 3]);
        assert_eq!(r.md_index, 0.0);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(
            align_components(&singular, &DMatrix::identity(2, 2)),
            Err(BssError::Singular)
        );
    }

    #[test]
    fn greedy_tie_break_prefers_lowest_row() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.5]);
        let r = align_components(&g, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
    }

    #[test]
    fn unmix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = SeriesMatrix::new(gaussian_matrix(&mut rng, 20, 3)).unwrap();
        let identity = UnmixingResult {
            gamma_hat: DMatrix::identity(3, 3),
            whitener: DMatrix::identity(3, 3),
            sample_mean: DVector::zeros(3),
            method: UnmixingMethod::Fobi,
            eigenvalue_gaps: DVector::zeros(3),
            degenerate_spectrum: false,
            converged: true,
        };
        assert_eq!(unmix(&x, &identity).unwrap(), x);

        let gamma = gaussian_matrix(&mut rng, 3, 3);
        let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let result = UnmixingResult {
            gamma_hat: gamma.clone(),
            sample_mean: mean.clone(),
            ..identity.clone()
        };
        let out = unmix(&x, &result).unwrap();
        for i in 0..20 {
            let xi = x.data().row(i).transpose() - &mean;
            let zi = &gamma * xi;
            for k in 0..3 {
                assert!((out.data()[(i, k)] - zi[k]).abs() < 1e-12);
            }
        }

        let wrong = UnmixingResult {
            gamma_hat: DMatrix::identity(2, 2),
            ..identity
        };
        assert!(matches!(
            unmix(&x, &wrong),
            Err(BssError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unmix_with_exact_inverse_recovers_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = SeriesMatrix::new(gaussian_matrix(&mut rng, 50, 3)).unwrap();
        let (z, _) = center(&z);
        let omega = gaussian_matrix(&mut rng, 3, 3);
        let x = z.transform(&omega).unwrap();
        let result = UnmixingResult {
            gamma_hat: omega.clone().try_inverse().unwrap(),
            whitener: DMatrix::identity(3, 3),
            sample_mean: DVector::zeros(3),
            method: UnmixingMethod::Fobi,
            eigenvalue_gaps: DVector::zeros(3),
            degenerate_spectrum: false,
            converged: true,
        };
        let back = unmix(&x, &result).unwrap();
        assert!((back.data() - z.data()).amax() < 1e-10);
    }

    /// Stacks the four quarter-turn rotations of a 2-d series, each block
    /// starting at the origin. Every second-order and fourth-order statistic
    /// of the result commutes with the rotation, so it is a multiple of the
    /// identity and both sources are exactly unidentifiable.
    fn quarter_turn_orbit(points: &[(f64, f64)]) -> SeriesMatrix {
        let mut rows = Vec::new();
        for k in 0..4 {
            rows.push((0.0, 0.0));
            for &(a, b) in points {
                rows.push(match k {
                    0 => (a, b),
                    1 => (-b, a),
                    2 => (-a, -b),
                    _ => (b, -a),
                });
            }
        }
        let cols = vec![
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
        ];
        SeriesMatrix::from_columns(&cols).unwrap()
    }

    #[test]
    fn fobi_flags_gaussian_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<(f64, f64)> = (0..500)
            .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        let res = fobi(&quarter_turn_orbit(&points)).unwrap();
        assert!(res.degenerate_spectrum);
        assert!(res.gamma_hat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn amuse_flags_identical_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state = (0.0, 0.0);
        let points: Vec<(f64, f64)> = (0..500)
            .map(|_| {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                state = (0.6 * state.0 + e1, 0.6 * state.1 + e2);
                state
            })
            .collect();
        let x = quarter_turn_orbit(&points);
        assert!(amuse(&x, 1).unwrap().degenerate_spectrum);
        let single = sobi(&x, &LagSet::new(vec![1]).unwrap()).unwrap();
        assert!(single.degenerate_spectrum);
    }

    #[test]
    fn separator_dispatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = SeriesMatrix::new(gaussian_matrix(&mut rng, 100, 2)).unwrap();
        let m = UnmixingMethod::Amuse { lag: 1 };
        assert_eq!(m.separate(&x).unwrap().method, m);
        assert!(matches!(
            UnmixingMethod::Amuse { lag: 100 }.separate(&x),
            Err(BssError::LagOutOfRange { .. })
        ));
        let json = serde_json::to_string(&UnmixingMethod::Sobi {
            lags: LagSet::range(2).unwrap(),
        })
        .unwrap();
        assert_eq!(json, r#"{"method":"sobi","lags":[1,2]}"#);
    }
}
