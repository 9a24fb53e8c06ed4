//! Simulator and learning agents for federated learning shared by several
//! competing service providers.

pub mod agent;
pub mod config;
pub mod conjgen;
pub mod env;
pub mod error;
pub mod fedcore;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod quantizer;
pub mod rng;
pub mod sysmodel;
pub mod tabular;
pub mod tcad;

pub use config::{load_config, ExperimentConfig};
pub use error::{Error, Result};
pub use rng::{rng_stream, Rng};
