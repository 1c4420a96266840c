pub mod attacks;
pub mod config;
pub mod dataset;
pub mod defenses;
pub mod error;
pub mod metrics;
mod linalg;
pub mod model;
pub mod neighbors;
pub mod rng;
pub mod run;
pub mod simulation;

pub use error::{Error, Result};
