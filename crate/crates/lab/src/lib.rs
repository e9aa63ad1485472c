// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven experiment runner: data, model, experiment and export
//! stages with a checksummed manifest.

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use manifest::{OutputDir, RunManifest, RunStatus};
pub use pipeline::run;
