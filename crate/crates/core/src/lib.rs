pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod routing;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
