pub mod cli;
pub mod config;
pub mod error;
pub mod gaussian;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod runner;
pub mod scenarios;
pub mod state;
pub mod trainer;

pub use error::{Error, Result};
