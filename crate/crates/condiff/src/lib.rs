//! Conditional score-model sandbox on synthetic low-dimensional data.
//!
//! The crate trains a small noise-prediction network with a frozen base and a
//! conditional side branch, injects the branch's features through
//! gradient-balanced operators, rebalances silent-signal data bias at the
//! dataset level, and audits how far the learned score field is from being
//! conservative (symmetric Jacobian). Everything runs in 64-bit floats on an
//! expression graph whose derivative operators are themselves differentiable,
//! so exact Jacobians, Hutchinson-style estimators, and second-order training
//! losses all share one engine.

pub mod autodiff;
pub mod cli;
pub mod combine;
pub mod conserve;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod scorenet;
pub mod synthdata;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
