//! Random generators for the latent components used in the simulation studies.
//!
//! Every draw comes from a ChaCha8 stream selected by a [`Seed`] root and a
//! `(replicate, component)` pair, so any replicate can be regenerated on its own
//! and in any order.

use crate::linalg;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("circulant embedding has eigenvalue {min_eigenvalue:e} and n = {n} is too large for the Cholesky fallback")]
    EmbeddingFailed { min_eigenvalue: f64, n: usize },
    #[error("no mixing matrix with condition number below {max_condition:e} in {attempts} draws")]
    MixingRejected { attempts: usize, max_condition: f64 },
}

/// Number of components addressable within one replicate.
pub const COMPONENT_STREAMS: u64 = 1 << 16;

/// Root of a family of independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed {
    pub root: u64,
}

impl Seed {
    pub const fn new(root: u64) -> Self {
        Self { root }
    }

    /// Generator for one `(replicate, component)` pair.
    ///
    /// The pair maps injectively onto the 64-bit ChaCha stream id
    /// `replicate * 2^16 + component`, so distinct pairs never share keystream.
    pub fn rng(&self, replicate: u64, component: u64) -> ChaCha8Rng {
        assert!(
            component < COMPONENT_STREAMS,
            "component index {component} exceeds the stream layout"
        );
        let replicate = replicate & ((1 << 48) - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(replicate * COMPONENT_STREAMS + component);
        rng
    }

    /// A new root mixed from this one and a label (SplitMix64 finalizer).
    pub fn derive(&self, label: u64) -> Seed {
        let mut z = self
            .root
            .wrapping_add(label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed::new(z ^ (z >> 31))
    }
}

fn default_burn_in() -> usize {
    1000
}

/// Law of one latent component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// i.i.d. Pareto with shape `alpha`, scale 1.
    Pareto { alpha: f64 },
    /// ARCH(1): `x_t = σ_t ε_t`, `σ_t² = alpha0 + alpha1 x_{t-1}²`.
    Arch1 {
        alpha0: f64,
        alpha1: f64,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
    },
    /// Squared fractional Gaussian noise minus one.
    SquaredFgn { hurst: f64 },
    /// Fractional Gaussian noise with unit variance.
    Fgn { hurst: f64 },
    /// Stationary Gaussian AR(1) with unit innovation variance.
    Ar1 { phi: f64 },
    /// i.i.d. standard Gaussian.
    Gaussian,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidParameter(msg));
        match *self {
            GeneratorSpec::Pareto { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                bad(format!("pareto alpha must be positive, got {alpha}"))
            }
            GeneratorSpec::Arch1 { alpha0, .. } if !(alpha0 > 0.0 && alpha0.is_finite()) => {
                bad(format!("arch1 alpha0 must be positive, got {alpha0}"))
            }
            GeneratorSpec::Arch1 { alpha1, .. } if !(0.0..1.0).contains(&alpha1) => {
                bad(format!("arch1 alpha1 must lie in [0, 1), got {alpha1}"))
            }
            GeneratorSpec::SquaredFgn { hurst } | GeneratorSpec::Fgn { hurst }
                if !(hurst > 0.0 && hurst < 1.0) =>
            {
                bad(format!("hurst parameter must lie in (0, 1), got {hurst}"))
            }
            GeneratorSpec::Ar1 { phi } if !(phi.abs() < 1.0) => {
                bad(format!("ar1 coefficient must satisfy |phi| < 1, got {phi}"))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>, SimError> {
        self.validate()?;
        match *self {
            GeneratorSpec::Pareto { alpha } => pareto_sample(alpha, n, rng),
            GeneratorSpec::Arch1 {
                alpha0,
                alpha1,
                burn_in,
            } => arch1_sample(alpha0, alpha1, n, burn_in, rng),
            GeneratorSpec::SquaredFgn { hurst } => squared_fgn_centered(hurst, n, rng),
            GeneratorSpec::Fgn { hurst } => fgn_sample(hurst, n, rng),
            GeneratorSpec::Ar1 { phi } => ar1_sample(phi, n, rng),
            GeneratorSpec::Gaussian => Ok((0..n).map(|_| rng.sample(StandardNormal)).collect()),
        }
    }

    /// Draws from the `(replicate, component)` stream of `seed`.
    pub fn sample_seeded(
        &self,
        n: usize,
        seed: &Seed,
        replicate: u64,
        component: u64,
    ) -> Result<Vec<f64>, SimError> {
        self.sample(n, &mut seed.rng(replicate, component))
    }

    pub fn label(&self) -> String {
        match *self {
            GeneratorSpec::Pareto { alpha } => format!("pareto({alpha})"),
            GeneratorSpec::Arch1 { alpha0, alpha1, .. } => format!("arch1({alpha0},{alpha1:.6})"),
            GeneratorSpec::SquaredFgn { hurst } => format!("squared_fgn({hurst})"),
            GeneratorSpec::Fgn { hurst } => format!("fgn({hurst})"),
            GeneratorSpec::Ar1 { phi } => format!("ar1({phi})"),
            GeneratorSpec::Gaussian => "gaussian".to_string(),
        }
    }
}

/// i.i.d. Pareto(`alpha`) draws with scale 1 via `U^{-1/alpha}`; extreme value index `1/alpha`.
pub fn pareto_sample<R: Rng + ?Sized>(
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SimError::InvalidParameter(format!(
            "pareto alpha must be positive, got {alpha}"
        )));
    }
    let exponent = -1.0 / alpha;
    // 1 - U lies in (0, 1], keeping the support at [1, inf).
    Ok((0..n)
        .map(|_| (1.0 - rng.random::<f64>()).powf(exponent))
        .collect())
}

/// ARCH(1) path of length `n` after discarding `burn_in` values.
///
/// Starts from `x_0 = σ_0 ε_0` with the stationary variance `σ_0² = α0 / (1 - α1)`.
pub fn arch1_sample<R: Rng + ?Sized>(
    alpha0: f64,
    alpha1: f64,
    n: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    GeneratorSpec::Arch1 {
        alpha0,
        alpha1,
        burn_in,
    }
    .validate()?;
    let sigma0 = (alpha0 / (1.0 - alpha1)).sqrt();
    let mut prev = sigma0 * rng.sample::<f64, _>(StandardNormal);
    let mut out = Vec::with_capacity(n);
    for t in 0..(burn_in + n) {
        let sigma = (alpha0 + alpha1 * prev * prev).sqrt();
        let x = sigma * rng.sample::<f64, _>(StandardNormal);
        if t >= burn_in {
            out.push(x);
        }
        prev = x;
    }
    Ok(out)
}

/// Stationary AR(1) `x_t = φ x_{t-1} + ε_t` with `x_0 ~ N(0, 1/(1-φ²))`.
pub fn ar1_sample<R: Rng + ?Sized>(phi: f64, n: usize, rng: &mut R) -> Result<Vec<f64>, SimError> {
    GeneratorSpec::Ar1 { phi }.validate()?;
    let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
    Ok((0..n)
        .map(|_| {
            let v = x;
            x = phi * x + rng.sample::<f64, _>(StandardNormal);
            v
        })
        .collect())
}

/// Autocovariance of unit-variance fGn: `½(|k+1|^{2H} - 2|k|^{2H} + |k-1|^{2H})`.
pub fn fgn_autocovariance(hurst: f64, k: usize) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

/// How an fGn path was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnMethod {
    CirculantEmbedding,
    /// Used when the embedding had eigenvalues below `-1e-10`.
    CholeskyFallback,
}

#[derive(Debug, Clone)]
pub struct FgnPath {
    pub values: Vec<f64>,
    pub method: FgnMethod,
}

/// Embedding eigenvalues in `[-NEGATIVE_TOL, 0)` are treated as zero.
const NEGATIVE_TOL: f64 = 1e-10;
/// Largest `n` for which the O(n³) Cholesky fallback is attempted.
pub const CHOLESKY_MAX_N: usize = 4096;

fn check_hurst(hurst: f64) -> Result<(), SimError> {
    if hurst > 0.0 && hurst < 1.0 {
        Ok(())
    } else {
        Err(SimError::InvalidParameter(format!(
            "hurst parameter must lie in (0, 1), got {hurst}"
        )))
    }
}

/// Unit-variance fractional Gaussian noise of length `n`.
pub fn fgn_sample<R: Rng + ?Sized>(hurst: f64, n: usize, rng: &mut R) -> Result<Vec<f64>, SimError> {
    fgn_sample_detailed(hurst, n, rng).map(|p| p.values)
}

/// Davies-Harte circulant embedding with a Cholesky fallback for small `n`.
pub fn fgn_sample_detailed<R: Rng + ?Sized>(
    hurst: f64,
    n: usize,
    rng: &mut R,
) -> Result<FgnPath, SimError> {
    check_hurst(hurst)?;
    if n == 0 {
        return Ok(FgnPath {
            values: Vec::new(),
            method: FgnMethod::CirculantEmbedding,
        });
    }
    let half = n.max(2).next_power_of_two();
    let m = 2 * half;
    let mut row: Vec<Complex<f64>> = (0..m)
        .map(|j| {
            let k = if j <= half { j } else { m - j };
            Complex::new(fgn_autocovariance(hurst, k), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut row);
    let min_eigenvalue = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
    if min_eigenvalue < -NEGATIVE_TOL {
        if n <= CHOLESKY_MAX_N {
            return Ok(FgnPath {
                values: fgn_cholesky(hurst, n, rng)?,
                method: FgnMethod::CholeskyFallback,
            });
        }
        return Err(SimError::EmbeddingFailed { min_eigenvalue, n });
    }
    let scale = 1.0 / m as f64;
    let mut w: Vec<Complex<f64>> = row
        .iter()
        .map(|lambda| {
            let amp = (lambda.re.max(0.0) * scale).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex::new(amp * re, amp * im)
        })
        .collect();
    fft.process(&mut w);
    Ok(FgnPath {
        values: w[..n].iter().map(|c| c.re).collect(),
        method: FgnMethod::CirculantEmbedding,
    })
}

/// Exact fGn through the Cholesky factor of the `n × n` Toeplitz covariance.
pub fn fgn_cholesky<R: Rng + ?Sized>(hurst: f64, n: usize, rng: &mut R) -> Result<Vec<f64>, SimError> {
    check_hurst(hurst)?;
    let gamma: Vec<f64> = (0..n).map(|k| fgn_autocovariance(hurst, k)).collect();
    let cov = DMatrix::from_fn(n, n, |i, j| gamma[i.abs_diff(j)]);
    let chol = cov.cholesky().ok_or_else(|| {
        SimError::InvalidParameter("fGn covariance is not positive definite".into())
    })?;
    let z = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((chol.l() * z).iter().copied().collect())
}

/// `(fGn_t)² - 1`: a long-memory, mean-zero, heavy-skewed series bounded below by -1.
pub fn squared_fgn_centered<R: Rng + ?Sized>(
    hurst: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    Ok(fgn_sample(hurst, n, rng)?
        .into_iter()
        .map(|x| x * x - 1.0)
        .collect())
}

/// Mixing matrix together with how many draws it took.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub matrix: DMatrix<f64>,
    pub draws: usize,
}

/// Consecutive rejections after which [`random_mixing_matrix`] gives up.
pub const MAX_MIXING_DRAWS: usize = 100;

/// `p × p` matrix with i.i.d. Uniform(`lo`, `hi`) entries, redrawn until its
/// condition number is below `max_condition`.
pub fn random_mixing_matrix<R: Rng + ?Sized>(
    p: usize,
    lo: f64,
    hi: f64,
    max_condition: f64,
    rng: &mut R,
) -> Result<MixingMatrix, SimError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(SimError::InvalidParameter(format!(
            "mixing range needs lo < hi, got ({lo}, {hi})"
        )));
    }
    if !(max_condition > 1.0) {
        return Err(SimError::InvalidParameter(format!(
            "max_condition must exceed 1, got {max_condition}"
        )));
    }
    if p == 0 {
        return Err(SimError::InvalidParameter("dimension must be positive".into()));
    }
    for draws in 1..=MAX_MIXING_DRAWS {
        let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(lo..hi));
        if linalg::condition_number(&m) < max_condition {
            return Ok(MixingMatrix { matrix: m, draws });
        }
    }
    Err(SimError::MixingRejected {
        attempts: MAX_MIXING_DRAWS,
        max_condition,
    })
}
