//! Active semantic segmentation under a pixel budget.
//!
//! An agent observes a scene through a sequence of retina-like glimpses,
//! accumulates encoder features in scene-aligned spatial memories, and at
//! every step predicts a full-scene segmentation together with a per-pixel
//! certainty map. The least-certain 16x16 patch becomes the next glimpse
//! location.

pub mod agent;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod policy;
pub mod render;
pub mod retina;
pub mod train;

pub use error::{AsegError, Result};
