//! Library surface of the experiment CLI: config parsing, the pipeline,
//! and report types. The binary in `main.rs` is a thin wrapper over
//! these so tests can drive everything in-process.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use pipeline::{aggregate_report, run_pipeline};
pub use report::ExperimentReport;
