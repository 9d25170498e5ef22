//! Length-controlled encoder-decoder transcription and compression.

pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
