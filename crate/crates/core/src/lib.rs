//! Score estimation for OU diffusion models with a two-layer ReLU network in
//! the neural tangent kernel regime, together with exact oracles and
//! diagnostics for every term of the estimation error.

pub mod acceptance;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod network;
pub mod ntk;
pub mod oracle;
pub mod persist;
pub mod pipeline;
pub mod schedule;
pub mod score;

pub use error::{Error, Result};
