//! Library surface of the experiment harness: configuration, pipeline
//! stages, result tables, and artifact validation. The binary in
//! `main.rs` is a thin argument-parsing layer over these.

pub mod artifacts;
pub mod config;
pub mod results;
pub mod stages;
pub mod validate;

pub use config::{ExperimentConfig, Method};
pub use results::{read_results_csv, write_strategy_comparison, ResultRow};
pub use stages::{run_pipeline, with_pool};
