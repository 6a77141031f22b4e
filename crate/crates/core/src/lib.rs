//! Streaming estimation for linear instrumental-variables models.

pub mod baselines;
pub mod dgp;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod learning_rate;
pub mod linalg;
pub mod report;
pub mod moments;
pub mod rng;
pub mod run;
pub mod s2sls;
pub mod sgmm;

pub use error::{Error, Result};
