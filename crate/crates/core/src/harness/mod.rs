// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration and the staged pipeline behind the CLI.

pub mod config;
pub mod pipeline;

pub use config::{BaselineConfigs, DataConfig, ExperimentConfig, SCHEMA_VERSION};
pub use pipeline::{
    graph_for, load_datasets, load_manifests, write_report_files, AblatedSet, BaseMetrics, BaselineKind,
    Pipeline, RunManifest, Stage, MANIFEST,
};
