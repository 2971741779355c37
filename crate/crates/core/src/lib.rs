#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod bench;
pub mod baselines;
pub mod covariance;
pub mod delta_variance;
pub mod error;
pub mod evaluation;
pub mod math;
pub mod models;
pub mod oracles;
pub mod qoi;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

/// Crate version, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
