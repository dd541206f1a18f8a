//! Alpha-divergence energy-minimization Kalman filtering.

pub mod baselines;
pub mod bench;
pub mod energy;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod model;
pub mod tracking;

pub use error::{FilterError, Result};
