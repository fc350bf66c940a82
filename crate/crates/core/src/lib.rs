//! Model-independent building blocks for a heatmap-seeded query detector.
//!
//! Everything in this crate is plain `f64` arithmetic with no tensor
//! dependency: box geometry and Soft-NMS, Gaussian center heatmaps and
//! peak extraction, Hungarian matching with the composite matching cost,
//! reference loss values, COCO-style AP and FROC evaluation, and dataset
//! handling (COCO ingestion, augmentation, synthetic cell images).

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod matching;

pub use error::{Error, Result};
pub use geometry::{BoxDelta, BoxN, BoxPx, Detection};
