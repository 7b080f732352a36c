//! File formats, threaded pretraining runs and evaluation drivers on top
//! of `trimodal-core`.

pub mod blob;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod run;
pub mod wav;

pub use error::{CliError, Result};
