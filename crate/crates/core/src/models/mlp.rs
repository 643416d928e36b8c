// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fully connected ReLU classifier with a per-weight graph.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, MeanGroup, Network, StreamVars, Wiring};
use crate::error::{Error, Result};
use crate::graph::{build_mlp_graph, ComputeGraph, NodeId};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `layer_dims[0]` inputs, ReLU hidden layers, linear logits.
///
/// Layer `l` maps `layer_dims[l]` units to `layer_dims[l + 1]` with a
/// `[out, in]` weight and an `[out]` bias. Canonical parameter order is
/// `W0, b0, W1, b1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl MlpModel {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::usage(format!("invalid MLP layer sizes {layer_dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            weights.push(Tensor::matrix(fan_out, fan_in, draw(fan_in * fan_out))?);
            biases.push(Tensor::vector(draw(fan_out)));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters in canonical order.
    pub fn from_parameters(layer_dims: &[usize], params: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::init(layer_dims, 0)?;
        if params.len() != 2 * (layer_dims.len() - 1) {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, got {}",
                2 * (layer_dims.len() - 1),
                params.len()
            )));
        }
        for (slot, p) in model.parameters_mut().into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::shape(
                    "mlp_parameters",
                    format!("expected {:?}, got {:?}", slot.shape(), p.shape()),
                ));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    fn layer_nodes(&self, l: usize) -> Vec<NodeId> {
        let last = self.layer_dims.len() - 1;
        (0..self.layer_dims[l])
            .map(|i| match l {
                0 => NodeId::Input(i),
                l if l == last => NodeId::OutputUnit(i),
                l => NodeId::Hidden {
                    layer: l - 1,
                    index: i,
                },
            })
            .collect()
    }
}

impl Network for MlpModel {
    fn architecture(&self) -> Architecture {
        Architecture::Mlp {
            layer_dims: self.layer_dims.clone(),
        }
    }

    fn graph(&self) -> Result<ComputeGraph> {
        build_mlp_graph(&self.layer_dims)
    }

    fn parameters(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|l| [format!("W{l}"), format!("b{l}")])
            .collect()
    }

    fn mean_groups(&self) -> Vec<MeanGroup> {
        (0..self.layer_dims.len() - 1)
            .map(|l| MeanGroup {
                nodes: self.layer_nodes(l),
                width: self.layer_dims[l],
            })
            .collect()
    }

    fn record(&self, tape: &mut Tape, params: &[Var], wiring: &Wiring) -> Result<StreamVars> {
        let layers = self.weights.len();
        if params.len() != 2 * layers {
            return Err(Error::usage("parameter slots do not match the model"));
        }
        let inputs = tape.leaf("inputs");
        let targets = tape.leaf("targets");
        let weights = tape.leaf("weights");
        let mut h = inputs;
        let mut activations = Vec::new();
        let mut offset = 0;
        for l in 0..layers {
            let (w, b) = (params[2 * l], params[2 * l + 1]);
            let z = match wiring {
                Wiring::Plain => tape.matmul_t(h, w),
                Wiring::Rewired { mask, means } => {
                    activations.push(h);
                    let shape = vec![self.layer_dims[l + 1], self.layer_dims[l]];
                    let size = shape[0] * shape[1];
                    let seg = tape.segment(*mask, offset, shape);
                    offset += size;
                    tape.masked_linear(h, means[l], w, seg)
                }
            };
            let z = tape.add(z, b);
            h = if l + 1 < layers { tape.relu(z) } else { z };
        }
        let loss = tape.cross_entropy(h, targets, weights);
        Ok(StreamVars {
            inputs,
            positions: None,
            targets,
            weights,
            logits: h,
            loss,
            activations,
        })
    }
}
