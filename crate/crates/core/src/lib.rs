//! Bayesian digital twin of a multi-access sensing network.

pub mod bayes;
pub mod coma;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod monitor;
pub mod nn;
pub mod policy;
pub mod records;

pub use error::{Error, Result};
