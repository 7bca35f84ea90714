//! Browser demo: three interactive operations over the `latent-evi` library,
//! exported through `wasm-bindgen`. Each returns a JSON string that the static
//! page in `www/` plots on a canvas.
//!
//! The `*_json` functions are ordinary Rust and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors into JS exceptions.

use latent_evi::bss::UnmixingMethod;
use latent_evi::evt::{Method, OrderStatistics, TailSpec};
use latent_evi::experiments::{self, HistogramSpec, MixingSpec, ScenarioSpec};
use latent_evi::simulate::{self, GeneratorSpec, Seed};
use latent_evi::stats;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest inputs accepted from the page, to keep the tab responsive.
pub const MAX_N: usize = 200_000;
pub const MAX_REPLICATIONS: usize = 500;

#[derive(Debug, Serialize)]
pub struct EstimatorCurves {
    pub n: usize,
    pub gamma: f64,
    pub k: Vec<usize>,
    pub hill: Vec<Option<f64>>,
    pub moment: Vec<Option<f64>>,
}

/// Hill and moment estimates of one Pareto(`alpha`) sample for `k = 2..=k_max`.
pub fn estimator_curves(alpha: f64, n: usize, k_max: usize, seed: u64) -> Result<EstimatorCurves, String> {
    if !(2..=MAX_N).contains(&n) {
        return Err(format!("n must lie in [2, {MAX_N}]"));
    }
    let x = simulate::pareto_sample(alpha, n, &mut Seed::new(seed).rng(0, 0)).map_err(|e| e.to_string())?;
    let os = OrderStatistics::new(&x).map_err(|e| e.to_string())?;
    let k: Vec<usize> = (2..=k_max.min(n - 1)).collect();
    Ok(EstimatorCurves {
        n,
        gamma: 1.0 / alpha,
        hill: k.iter().map(|&k| os.hill(k).ok()).collect(),
        moment: k.iter().map(|&k| os.moment(k).ok()).collect(),
        k,
    })
}

#[derive(Debug, Serialize)]
pub struct AgreementHistogram {
    pub n: usize,
    pub k_n: usize,
    pub bin_lo: Vec<f64>,
    pub width: f64,
    pub count_true: Vec<u64>,
    pub count_estimated: Vec<u64>,
    pub agreement_fraction: Option<f64>,
    pub overlap: Option<f64>,
    pub median_md_index: Option<f64>,
}

/// Max-of-components Hill estimates from true and unmixed latents of three
/// mixed Pareto sources, unmixed by `unmixer` (`fobi`, `amuse:LAG`, `sobi:MAX`).
pub fn agreement_histogram(
    alphas: [f64; 3],
    unmixer: &str,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<AgreementHistogram, String> {
    if n > MAX_N || replications == 0 || replications > MAX_REPLICATIONS {
        return Err(format!("need n <= {MAX_N} and 1 <= replications <= {MAX_REPLICATIONS}"));
    }
    let unmixer: UnmixingMethod = unmixer.parse()?;
    let histogram = HistogramSpec {
        lo: -0.2,
        hi: 1.0,
        width: 0.02,
    };
    let spec = ScenarioSpec {
        name: "demo".into(),
        components: alphas.iter().map(|&alpha| GeneratorSpec::Pareto { alpha }).collect(),
        unmixer,
        sample_sizes: vec![n],
        replications,
        tail: TailSpec::Power { exponent: 0.25 },
        estimators: vec![Method::Hill],
        seed: Seed::new(seed),
        mixing: MixingSpec::default(),
        histogram,
        agreement_epsilon: 0.05,
        component_streams: None,
        rate: None,
    };
    let summary = experiments::run_study(&spec).map_err(|e| e.to_string())?;
    let cell = summary.cell(n, Method::Hill).ok_or("empty study")?;
    let h = &cell.histogram;
    Ok(AgreementHistogram {
        n,
        k_n: cell.k_n,
        bin_lo: (0..h.bins()).map(|i| h.bin_edges(i).0).collect(),
        width: h.width,
        count_true: h.true_counts.clone(),
        count_estimated: h.estimated_counts.clone(),
        agreement_fraction: cell.agreement_fraction,
        overlap: cell.histogram_overlap,
        median_md_index: cell.median_md_index,
    })
}

#[derive(Debug, Serialize)]
pub struct FgnView {
    pub hurst: f64,
    pub path: Vec<f64>,
    pub lags: Vec<usize>,
    pub sample_acv: Vec<f64>,
    pub theory_acv: Vec<f64>,
}

/// An fGn path (first `show` points returned) with sample and exact
/// autocovariances at lags `0..=max_lag`.
pub fn fgn_view(hurst: f64, n: usize, max_lag: usize, show: usize, seed: u64) -> Result<FgnView, String> {
    if !(2..=MAX_N).contains(&n) || max_lag >= n {
        return Err(format!("need 2 <= n <= {MAX_N} and max_lag < n"));
    }
    let x = simulate::fgn_sample(hurst, n, &mut Seed::new(seed).rng(0, 0)).map_err(|e| e.to_string())?;
    let lags: Vec<usize> = (0..=max_lag).collect();
    Ok(FgnView {
        hurst,
        sample_acv: lags.iter().map(|&h| stats::autocovariance(&x, h)).collect(),
        theory_acv: lags.iter().map(|&h| simulate::fgn_autocovariance(hurst, h)).collect(),
        lags,
        path: x[..show.min(n)].to_vec(),
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = estimatorCurves)]
pub fn estimator_curves_json(alpha: f64, n: usize, k_max: usize, seed: u64) -> Result<String, JsError> {
    to_json(estimator_curves(alpha, n, k_max, seed))
}

#[wasm_bindgen(js_name = agreementHistogram)]
pub fn agreement_histogram_json(
    alpha1: f64,
    alpha2: f64,
    alpha3: f64,
    unmixer: &str,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<String, JsError> {
    to_json(agreement_histogram([alpha1, alpha2, alpha3], unmixer, n, replications, seed))
}

#[wasm_bindgen(js_name = fgnView)]
pub fn fgn_view_json(hurst: f64, n: usize, max_lag: usize, show: usize, seed: u64) -> Result<String, JsError> {
    to_json(fgn_view(hurst, n, max_lag, show, seed))
}
