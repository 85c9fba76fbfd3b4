//! Command-line orchestration of the gradient atoms pipeline.
//!
//! Every subcommand reads and writes a workspace directory; `run-all` chains
//! them. The library half exists so tests can drive the pipeline in-process.

pub mod cli;
pub mod config;
pub mod import;
pub mod pipeline;
pub mod report;

pub use config::PipelineConfig;
pub use pipeline::{run_all, Workspace};
