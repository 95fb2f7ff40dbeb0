//! Differentially private Bayesian inference for logistic and Poisson
//! regression from noisy polynomial summary statistics.

pub mod approx;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod inference;
pub mod moments;
pub mod oracles;
pub mod privacy;
pub mod sstats;

pub use error::{Error, ErrorKind, Result};
pub use exec::Execution;
