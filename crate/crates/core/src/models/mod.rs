// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference base models and the interface editors use to drive them.

pub mod checkpoint;
pub mod corpus;
pub mod mlp;
pub mod train;
pub mod transformer;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::graph::{ComputeGraph, NodeId};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{AnyModel, Checkpoint, WeightVector};
pub use mlp::MlpModel;
pub use transformer::{ToyTransformer, TransformerConfig};

/// How a forward pass is recorded.
#[derive(Debug, Clone)]
pub enum Wiring {
    /// The ordinary stacked computation.
    Plain,
    /// Every node reads each parent through
    /// `w_e * v_parent + (1 - w_e) * mu_parent`, with `w` taken from `mask`
    /// (one entry per graph edge, canonical order) and `mu` from `means`
    /// (one slot per [`MeanGroup`]).
    Rewired { mask: Var, means: Vec<Var> },
}

/// Ablation values are stored per node but fed to the tape per group.
///
/// A group with several nodes holds one scalar per node (per-weight graphs);
/// a group with a single node holds that node's whole activation vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeanGroup {
    pub nodes: Vec<NodeId>,
    pub width: usize,
}

/// Vars of one recorded forward pass over one batch.
#[derive(Debug, Clone)]
pub struct StreamVars {
    pub inputs: Var,
    pub positions: Option<Var>,
    pub targets: Var,
    pub weights: Var,
    pub logits: Var,
    /// Weighted mean cross-entropy of the batch.
    pub loss: Var,
    /// Per [`MeanGroup`], the var whose row mean is the group's activation
    /// mean. Empty for plain wiring.
    pub activations: Vec<Var>,
}

/// Architecture descriptor stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    Mlp { layer_dims: Vec<usize> },
    Transformer(TransformerConfig),
}

/// A model an editor can rewrite, ablate and fine-tune.
pub trait Network: Clone + Send + Sync {
    fn architecture(&self) -> Architecture;

    /// The computational graph at this family's granularity.
    fn graph(&self) -> Result<ComputeGraph>;

    /// Parameters in canonical order.
    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_names(&self) -> Vec<String>;

    fn mean_groups(&self) -> Vec<MeanGroup>;

    /// Records a forward pass plus its loss. `params` are leaves declared in
    /// canonical parameter order.
    fn record(&self, tape: &mut Tape, params: &[Var], wiring: &Wiring) -> Result<StreamVars>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}

/// Merged-class label of an MNIST digit: digits `d` and `d + 5` share a class.
pub fn merge_labels(digit: u32) -> Result<u32> {
    if digit > 9 {
        return Err(crate::Error::usage(format!("digit {digit} outside 0..=9")));
    }
    Ok(digit % 5)
}

/// Copy of an MNIST dataset with targets replaced by merged classes; tags
/// keep the original digits.
pub fn merge_dataset_labels(data: &Dataset) -> Result<Dataset> {
    let mut out = data.clone();
    for ex in &mut out.examples {
        ex.targets = vec![merge_labels(ex.tag)?];
    }
    Ok(out)
}
