pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod obs_store;
pub mod ratings;
pub mod runner;
pub mod seed;
pub mod simgen;

pub use error::{Error, Result};
