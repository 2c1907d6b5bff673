//! Near-field XL-MIMO CSI feedback: spherical-wave channel generation,
//! synthetic datasets, the ExtendNLNet / CsiNet autoencoders, training and
//! evaluation.

pub mod channel;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use error::{Error, Result};
