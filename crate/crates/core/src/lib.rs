//! Gaze stabilization toolkit.
//!
//! Turns noisy saccade-then-fixation gaze sequences into target-centered
//! fixation predictions: segmentation of fixation onsets, corpus cleaning,
//! target-contracted synthetic augmentation, a sequence-to-sequence temporal
//! model with a frequency-decomposition backbone, composite-loss training
//! with gradient verification, and CI/AI/AD evaluation metrics.

pub mod augmentation;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod gaze;
pub mod io;
pub mod model;
pub mod segmentation;
pub mod simulator;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
