//! Orchestration for the forge moment-simulation pipeline: configuration,
//! resumable file-based stages, run manifests and a synthetic demo fixture.

pub mod config;
pub mod demo;
pub mod embed;
pub mod manifest;
pub mod pipeline;

pub use config::{ConfigError, PipelineConfig};
pub use manifest::RunManifest;
pub use pipeline::{run_pipeline, PipelineError, RunOptions, Stage};
