//! Robust supervised contrastive losses under label noise.
//!
//! The crate is organised around six pieces:
//!
//! * [`distribution`]: finite populations, label-corruption matrices and the
//!   noisy distributions they induce.
//! * [`embedding`]: small parametric encoders with analytic gradients.
//! * [`losses`]: InfoNCE, RevNCE, SymNCE, RINCE and neighbour-thresholded
//!   InfoNCE, each returning values and embedding gradients.
//! * [`risk`]: exact enumeration and Monte Carlo estimation of the clean,
//!   noisy and additional risks, plus the identity checks built on them.
//! * [`trainer`]: SupCon-style training on synthetic mixtures, linear
//!   probing and noise sweeps.
//! * [`cli`]: configuration loading and the command implementations used by
//!   the `symnce` binary.

pub mod cli;
pub mod distribution;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod risk;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Crate version recorded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
