//! Extreme value index estimation for the latent components of a linear
//! mixture.
//!
//! The pipeline is: recover independent latent series with a blind source
//! separation method ([`bss`]), take absolute values, and estimate the extreme
//! value index of each recovered component with the Hill or moment estimator
//! ([`evt`]). [`simulate`] and [`experiments`] reproduce Monte Carlo studies of
//! how much the separation step perturbs the estimates; [`rolling`] runs the
//! moving-window workflow on price or return series.

// `!(x > 0.0)`-style comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bss;
pub mod checks;
pub mod evt;
pub mod experiments;
pub mod linalg;
pub mod rolling;
pub mod simulate;
pub mod stats;

pub use bss::{SeriesMatrix, UnmixingMethod, UnmixingResult};
pub use evt::{EviEstimate, Method, TailSpec};
pub use simulate::{GeneratorSpec, Seed};
