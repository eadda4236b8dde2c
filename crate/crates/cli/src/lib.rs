//! Pipeline around `histotune-core`: configuration, synthetic data, the
//! pretrain / fine-tune / extract / experiment commands and report output.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod logging;
pub mod plots;
pub mod report;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
