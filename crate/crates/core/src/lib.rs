//! Breast-histopathology image classifier: a truncated MobileNet backbone
//! followed by residual dual-shuffle attention blocks, with the data,
//! training, evaluation and reporting pipeline around it.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
