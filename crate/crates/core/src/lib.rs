pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod trainer;
pub mod transport;

pub use config::{ProbabilitySource, RunConfig, WeightMode};
pub use error::{Error, Result};
