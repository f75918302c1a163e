//! One-stage object detection trained by mimicking a jointly trained
//! two-stage head over a shared backbone.

pub mod anchors;
pub mod backbone;
pub mod boxes;
pub mod config;
pub mod error;
pub mod heads;
pub mod layers;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
