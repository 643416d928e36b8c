// SPDX-License-Identifier: MIT OR Apache-2.0

//! Learn which edges of a network to ablate so a targeted behavior disappears
//! while everything else keeps working.

pub mod ablation;
pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod harness;
pub mod idx;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod plot;
pub mod program;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
