//! Heatmap-seeded query transformer detector on candle.
//!
//! A backbone with a self-attention block at stride 16 feeds a feature
//! pyramid. A stride-4 center heatmap proposes peaks; each peak seeds one
//! decoder query that attends over the flattened multi-scale memory and
//! predicts a foreground score and anchor-relative box offsets.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod detector;
pub mod error;
pub mod loss;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pe;
pub mod query;
pub mod sample;

pub use config::{BackboneKind, ModelConfig};
pub use detector::{Detector, ForwardOutput, LossConfig, LossOutput};
pub use error::{ModelError, Result};
