//! Configuration-driven pipeline around the `twinshield` engine: every
//! stage writes its artifacts to one output directory and records their
//! hashes and seeds in `manifest.json`.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::PipelineConfig;
pub use error::CliError;
pub use pipeline::{Pipeline, Stage};
