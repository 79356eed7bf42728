//! Stochastic collapse models with white and colored noise.

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod fncheck;
pub mod hilbert;
pub mod kernels;
pub mod macrobody;
pub mod master;
pub mod noise;
pub mod quad;
pub mod reduction;
pub mod stats;

pub use error::{Error, Result};

/// Version of the simulation core, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
