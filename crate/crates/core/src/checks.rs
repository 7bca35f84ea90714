//! Randomized property batteries for the order-statistic inequalities the
//! estimators rely on, plus estimator scale invariance.
//!
//! Each battery takes the order-statistic routine as a parameter so that a
//! deliberately broken implementation can be plugged in to confirm the
//! batteries actually catch faults.

use crate::evt::{self, Method, OrderStatistics};
use crate::simulate::Seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// `f(sample, m)` returning `y(m,n)`, the `m`-th smallest value.
pub type OrderStatFn = dyn Fn(&[f64], usize) -> f64 + Sync;

/// The library's order statistic.
pub fn reference_order_statistic(sample: &[f64], m: usize) -> f64 {
    evt::kth_largest(sample, m).expect("battery inputs are finite and m is in range")
}

/// A plausible bug: sorting by magnitude instead of by value. It agrees with the
/// reference on nonnegative input, so only batteries that use signed data notice.
pub fn magnitude_sorted_order_statistic(sample: &[f64], m: usize) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    s[m - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryReport {
    pub name: &'static str,
    pub instances: usize,
    pub violations: usize,
    /// Human-readable description of the first failing instance.
    pub counterexample: Option<String>,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    fn record(&mut self, detail: impl FnOnce() -> String) {
        self.violations += 1;
        if self.counterexample.is_none() {
            self.counterexample = Some(detail());
        }
    }
}

fn battery(name: &'static str, instances: usize) -> BatteryReport {
    BatteryReport {
        name,
        instances,
        violations: 0,
        counterexample: None,
    }
}

/// Uniform draw from the dyadic grid `{j / 1024 : |j| <= bound}`. Sums and
/// differences of such values stay exact in `f64`, so the inequality checks
/// below involve no rounding at all.
fn dyadic<R: Rng>(rng: &mut R, bound: i64) -> f64 {
    rng.random_range(-bound..=bound) as f64 / 1024.0
}

fn battery_rng(seed: Seed, stream: u64) -> ChaCha8Rng {
    seed.derive(0xC4EC).rng(0, stream)
}

/// If `a_i <= b_i` for every `i`, then `y_a(m) <= y_b(m)` for every `m`.
pub fn monotone_order_battery(instances: usize, seed: Seed, order_stat: &OrderStatFn) -> BatteryReport {
    let mut rng = battery_rng(seed, 0);
    let mut report = battery("monotone_order", instances);
    for inst in 0..instances {
        let n = rng.random_range(2..=40);
        let a: Vec<f64> = (0..n).map(|_| dyadic(&mut rng, 1 << 16)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|&v| {
                // Ties (zero shift) are kept frequent on purpose.
                if rng.random_bool(0.3) {
                    v
                } else {
                    v + dyadic(&mut rng, 1 << 16).abs()
                }
            })
            .collect();
        for m in 1..=n {
            let (ya, yb) = (order_stat(&a, m), order_stat(&b, m));
            if ya > yb {
                report.record(|| {
                    format!("instance {inst}: a = {a:?}, b = {b:?}, m = {m}: y_a = {ya} > y_b = {yb}")
                });
                break;
            }
        }
    }
    report
}

/// `|y_{|x+e|}(m) - y_{|x|}(m)| <= max_i |e_i|` for every `m`.
pub fn weyl_battery(instances: usize, seed: Seed, order_stat: &OrderStatFn) -> BatteryReport {
    let mut rng = battery_rng(seed, 1);
    let mut report = battery("weyl_perturbation", instances);
    for inst in 0..instances {
        let n = rng.random_range(2..=40);
        let x: Vec<f64> = (0..n).map(|_| dyadic(&mut rng, 1 << 16)).collect();
        let scale = 1i64 << rng.random_range(0..=16);
        let e: Vec<f64> = (0..n).map(|_| dyadic(&mut rng, scale)).collect();
        let bound = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let abs_x = evt::abs_values(&x);
        let abs_xe: Vec<f64> = x.iter().zip(&e).map(|(a, b)| (a + b).abs()).collect();
        for m in 1..=n {
            let gap = (order_stat(&abs_xe, m) - order_stat(&abs_x, m)).abs();
            if gap > bound {
                report.record(|| {
                    format!("instance {inst}: x = {x:?}, e = {e:?}, m = {m}: gap {gap} > max|e| = {bound}")
                });
                break;
            }
        }
    }
    report
}

/// `γ̂(c·y) = γ̂(y)` for Hill and moment, within `tol · max(1, |γ̂|)`.
pub fn scale_invariance_battery(instances: usize, seed: Seed, tol: f64) -> BatteryReport {
    let mut rng = battery_rng(seed, 2);
    let mut report = battery("scale_invariance", instances);
    for inst in 0..instances {
        let n = rng.random_range(20..=400);
        let shape = rng.random_range(0.2..4.0);
        let y: Vec<f64> = (0..n)
            .map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / shape))
            .collect();
        let c = 10f64.powf(rng.random_range(-6.0..6.0));
        let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
        let k = rng.random_range(1..n);
        let (os, os_c) = (
            OrderStatistics::new(&y).expect("finite"),
            OrderStatistics::new(&scaled).expect("finite"),
        );
        for method in [Method::Hill, Method::Moment] {
            let est = |o: &OrderStatistics| match method {
                Method::Hill => o.hill(k),
                Method::Moment => o.moment(k),
            };
            match (est(&os), est(&os_c)) {
                (Ok(g), Ok(gc)) => {
                    if (g - gc).abs() > tol * g.abs().max(1.0) {
                        report.record(|| {
                            format!("instance {inst}: {method} with k = {k}, c = {c}: {g} vs {gc}")
                        });
                    }
                }
                (Err(_), Err(_)) => {}
                (a, b) => report.record(|| {
                    format!("instance {inst}: {method} with k = {k}, c = {c}: {a:?} vs {b:?}")
                }),
            }
        }
    }
    report
}

/// All three batteries with the given order-statistic routine.
pub fn run_all(instances: usize, seed: Seed, order_stat: &OrderStatFn) -> Vec<BatteryReport> {
    vec![
        monotone_order_battery(instances, seed, order_stat),
        weyl_battery(instances, seed, order_stat),
        scale_invariance_battery(instances.min(1000), seed, 1e-12),
    ]
}
