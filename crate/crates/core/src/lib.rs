//! Emotion-aware dialogue management and state-conditioned response
//! generation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod emodm;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod priors;
pub mod respg;
pub mod trainer;

pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
