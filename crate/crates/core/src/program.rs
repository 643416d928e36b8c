// SPDX-License-Identifier: MIT OR Apache-2.0

//! A model recorded on a tape together with the slots needed to feed it.

use std::collections::HashMap;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::{Architecture, Network, StreamVars, Wiring};
use crate::tape::{Bindings, Tape, Var};
use crate::tensor::Tensor;

/// Which leaves of a [`Program`] receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Parameters,
    Mask,
}

/// One or more forward passes of a model sharing parameter, mask and mean
/// leaves. Callers may append further ops (objectives) through [`Program::tape_mut`].
#[derive(Debug, Clone)]
pub struct Program {
    tape: Tape,
    params: Vec<Var>,
    mask: Option<Var>,
    means: Vec<Var>,
    streams: Vec<StreamVars>,
    seq_len: Option<usize>,
}

impl Program {
    /// Records `streams` plain forward passes.
    pub fn plain<N: Network>(model: &N, streams: usize, trainable: Trainable) -> Result<Self> {
        Self::build(model, streams, false, trainable)
    }

    /// Records `streams` forward passes through the edge-rewired graph.
    pub fn rewired<N: Network>(model: &N, streams: usize, trainable: Trainable) -> Result<Self> {
        Self::build(model, streams, true, trainable)
    }

    fn build<N: Network>(
        model: &N,
        streams: usize,
        rewired: bool,
        trainable: Trainable,
    ) -> Result<Self> {
        if !rewired && trainable == Trainable::Mask {
            return Err(Error::usage("a plain program has no mask to train"));
        }
        let mut tape = Tape::new();
        let names = model.parameter_names();
        let params: Vec<Var> = names
            .iter()
            .map(|n| {
                if trainable == Trainable::Parameters {
                    tape.param(n.clone())
                } else {
                    tape.leaf(n.clone())
                }
            })
            .collect();
        let (mask, means, wiring) = if rewired {
            let mask = if trainable == Trainable::Mask {
                tape.param("mask")
            } else {
                tape.leaf("mask")
            };
            let means: Vec<Var> = (0..model.mean_groups().len())
                .map(|i| tape.leaf(format!("mean{i}")))
                .collect();
            let wiring = Wiring::Rewired {
                mask,
                means: means.clone(),
            };
            (Some(mask), means, wiring)
        } else {
            (None, Vec::new(), Wiring::Plain)
        };
        let streams = (0..streams)
            .map(|_| model.record(&mut tape, &params, &wiring))
            .collect::<Result<Vec<_>>>()?;
        let seq_len = match model.architecture() {
            Architecture::Mlp { .. } => None,
            Architecture::Transformer(c) => Some(c.context),
        };
        Ok(Self {
            tape,
            params,
            mask,
            means,
            streams,
            seq_len,
        })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn mask(&self) -> Option<Var> {
        self.mask
    }

    pub fn stream(&self, i: usize) -> &StreamVars {
        &self.streams[i]
    }

    pub fn bind_parameters<'a>(&self, b: &mut Bindings<'a>, values: &[&'a Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (&slot, &v) in self.params.iter().zip(values) {
            b.bind(slot, v);
        }
        Ok(())
    }

    pub fn bind_ablation<'a>(
        &self,
        b: &mut Bindings<'a>,
        mask: &'a Tensor,
        means: &'a [Tensor],
    ) -> Result<()> {
        let slot = self
            .mask
            .ok_or_else(|| Error::usage("a plain program takes no ablation values"))?;
        if means.len() != self.means.len() {
            return Err(Error::usage(format!(
                "expected {} mean tensors, got {}",
                self.means.len(),
                means.len()
            )));
        }
        b.bind(slot, mask);
        for (&s, m) in self.means.iter().zip(means) {
            b.bind(s, m);
        }
        Ok(())
    }

    pub fn bind_batch<'a>(&self, b: &mut Bindings<'a>, stream: usize, batch: &'a Batch) -> Result<()> {
        let s = self
            .streams
            .get(stream)
            .ok_or_else(|| Error::usage(format!("no stream {stream}")))?;
        if batch.seq_len != self.seq_len {
            return Err(Error::usage(format!(
                "batch sequence length {:?} does not match the model's {:?}",
                batch.seq_len, self.seq_len
            )));
        }
        b.bind(s.inputs, &batch.inputs);
        b.bind(s.targets, &batch.targets);
        b.bind(s.weights, &batch.weights);
        if let (Some(slot), Some(pos)) = (s.positions, batch.positions.as_ref()) {
            b.bind(slot, pos);
        }
        Ok(())
    }

    pub fn forward(&mut self, bindings: &Bindings<'_>) -> Result<()> {
        self.tape.evaluate(bindings).map(|_| ())
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.tape.value(var)
    }

    pub fn backward(&self, loss: Var) -> Result<HashMap<Var, Tensor>> {
        self.tape.backpropagate(loss)
    }
}

/// Ablation inputs for a rewired forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Ablation<'a> {
    pub mask: &'a Tensor,
    pub means: &'a [Tensor],
}

/// Logits of `model` on `batch`, either plain or through the rewired graph.
pub fn predict<N: Network>(model: &N, batch: &Batch, ablation: Option<Ablation<'_>>) -> Result<Tensor> {
    let mut program = match ablation {
        None => Program::plain(model, 1, Trainable::Nothing)?,
        Some(_) => Program::rewired(model, 1, Trainable::Nothing)?,
    };
    let params = model.parameters();
    let mut b = Bindings::new();
    program.bind_parameters(&mut b, &params)?;
    if let Some(a) = ablation {
        program.bind_ablation(&mut b, a.mask, a.means)?;
    }
    program.bind_batch(&mut b, 0, batch)?;
    program.forward(&b)?;
    program.value(program.stream(0).logits).cloned()
}
