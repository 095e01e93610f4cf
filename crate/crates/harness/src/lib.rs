//! Pipeline stages, sweeps, comparisons and the evaluation protocol behind
//! the `onerec` command-line tool.

pub mod compare;
pub mod config;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod pipeline;
pub mod sweep;

pub use config::{Precision, RunConfig};
pub use error::{HarnessError, Result};
pub use pipeline::{run_pipeline, run_stage, PolicySource, Stage};
