//! Histopathology feature-extraction toolkit: Macenko stain normalization,
//! tiling, a reduced depthwise-separable CNN with two-step fine-tuning,
//! linear downstream models and repeated cross-validation statistics.

pub mod downstream;
pub mod error;
pub mod eval;
pub mod features;
pub mod finetune;
pub mod io;
pub mod nn;
pub mod seed;
pub mod stain;
pub mod tiling;

pub use error::{Error, Result};
pub use features::FeatureMatrix;
