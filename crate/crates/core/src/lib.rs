//! Prosody-aware voice conversion from speaker-independent bottleneck features.

pub mod config;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod prosody;
pub mod seeds;
pub mod tensorfile;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
