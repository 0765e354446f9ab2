//! Feedback cooling and squashing of a measured quantum oscillator.
//!
//! The crate has a closed-form stationary solution (`analytic`), a truncated
//! number-basis simulator for the master equation (`evolve_det`) and its
//! stochastic unraveling (`evolve_stoch`), plus a two-mode Gaussian model of
//! the probe-cavity coupling (`gaussian2`).

pub mod analytic;
pub mod error;
pub mod evolve_det;
pub mod evolve_stoch;
pub mod exec;
pub mod gaussian2;
pub mod hilbert;
pub mod params;
pub mod validation;

pub use error::{Error, Result};
pub use exec::Exec;
pub use params::ModelParams;
