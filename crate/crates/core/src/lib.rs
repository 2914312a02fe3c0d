//! Stability-map feature selection for visual place recognition.
//!
//! A small U-Net-shaped network predicts a per-pixel stability activation.
//! The activation selects local features and weights epipolar verification
//! in a bag-of-words loop-closure pipeline.

pub mod autodiff;
mod binio;
pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod retrieval;
pub mod selection;
pub mod trainer;

pub use binio::DecodeError;
