// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small pre-norm decoder-only transformer.

use std::collections::HashMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Architecture, MeanGroup, Network, StreamVars, Wiring};
use crate::error::{Error, Result};
use crate::graph::{build_residual_graph, ComputeGraph, NodeId};
use crate::tape::{MixTerm, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_mlp: usize,
    /// Every sequence fed to the model has exactly this many tokens.
    pub context: usize,
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    fn validate(&self) -> Result<()> {
        let TransformerConfig {
            vocab,
            d_model,
            layers,
            heads,
            d_mlp,
            context,
        } = *self;
        if [vocab, d_model, layers, heads, d_mlp, context].contains(&0) {
            return Err(Error::usage(format!("transformer sizes must be positive: {self:?}")));
        }
        if d_model % heads != 0 {
            return Err(Error::usage(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    heads: Vec<Head>,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Token and position embeddings, `layers` blocks of attention heads plus a
/// GELU MLP, a final layer norm and an untied unembedding. Attention has no
/// biases; each head owns its `W_Q, W_K, W_V` (`[d, d_head]`) and `W_O`
/// (`[d_head, d]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: TransformerConfig,
    tok_embed: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    unembed: Tensor,
    unembed_b: Tensor,
}

/// Slot positions of one block inside the flat parameter list.
struct BlockSlots {
    ln1: (usize, usize),
    heads: Vec<[usize; 4]>,
    ln2: (usize, usize),
    mlp: [usize; 4],
}

impl ToyTransformer {
    /// Gaussian initialization with standard deviation 0.02; the output
    /// projections of each block are scaled down by `sqrt(2 * layers)`.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid deviation");
        let proj = 0.02 / ((2 * config.layers) as f64).sqrt();
        let proj_normal = Normal::new(0.0, proj).expect("valid deviation");
        let mut gauss = |rows: usize, cols: usize, dist: &Normal<f64>| -> Tensor {
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
                .expect("consistent sizes")
        };
        let (d, dh, v) = (config.d_model, config.d_head(), config.vocab);
        let tok_embed = gauss(v, d, &normal);
        let pos_embed = gauss(config.context, d, &normal);
        let mut blocks = Vec::new();
        for _ in 0..config.layers {
            let heads = (0..config.heads)
                .map(|_| Head {
                    wq: gauss(d, dh, &normal),
                    wk: gauss(d, dh, &normal),
                    wv: gauss(d, dh, &normal),
                    wo: gauss(dh, d, &proj_normal),
                })
                .collect();
            blocks.push(Block {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                heads,
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w1: gauss(d, config.d_mlp, &normal),
                b1: Tensor::zeros(&[config.d_mlp]),
                w2: gauss(config.d_mlp, d, &proj_normal),
                b2: Tensor::zeros(&[d]),
            });
        }
        let unembed = gauss(d, v, &normal);
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            blocks,
            lnf_g: Tensor::ones(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            unembed,
            unembed_b: Tensor::zeros(&[v]),
        })
    }

    /// Builds a model from explicit parameters in canonical order.
    pub fn from_parameters(config: TransformerConfig, params: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        let slots = model.parameters_mut();
        if slots.len() != params.len() {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::shape(
                    "transformer_parameters",
                    format!("expected {:?}, got {:?}", slot.shape(), p.shape()),
                ));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    fn block_slots(&self) -> Vec<BlockSlots> {
        let mut next = 2;
        let mut take = |n: usize| {
            let start = next;
            next += n;
            start
        };
        (0..self.config.layers)
            .map(|_| {
                let ln1 = take(2);
                let heads = (0..self.config.heads)
                    .map(|_| {
                        let s = take(4);
                        [s, s + 1, s + 2, s + 3]
                    })
                    .collect();
                let ln2 = take(2);
                let mlp = take(4);
                BlockSlots {
                    ln1: (ln1, ln1 + 1),
                    heads,
                    ln2: (ln2, ln2 + 1),
                    mlp: [mlp, mlp + 1, mlp + 2, mlp + 3],
                }
            })
            .collect()
    }

    fn head_out(&self, tape: &mut Tape, x: Var, params: &[Var], slots: [usize; 4]) -> Var {
        let q = tape.matmul(x, params[slots[0]]);
        let k = tape.matmul(x, params[slots[1]]);
        let v = tape.matmul(x, params[slots[2]]);
        let a = tape.causal_attention(q, k, v, self.config.context);
        tape.matmul(a, params[slots[3]])
    }

    fn mlp_out(&self, tape: &mut Tape, x: Var, params: &[Var], slots: [usize; 4]) -> Var {
        let h = tape.matmul(x, params[slots[0]]);
        let h = tape.add(h, params[slots[1]]);
        let h = tape.gelu(h);
        let o = tape.matmul(h, params[slots[2]]);
        tape.add(o, params[slots[3]])
    }

    fn unembed_out(&self, tape: &mut Tape, r: Var, params: &[Var]) -> Var {
        let n = params.len();
        let x = tape.layer_norm(r, params[n - 4], params[n - 3], LN_EPS);
        let logits = tape.matmul(x, params[n - 2]);
        tape.add(logits, params[n - 1])
    }
}

impl Network for ToyTransformer {
    fn architecture(&self) -> Architecture {
        Architecture::Transformer(self.config)
    }

    fn graph(&self) -> Result<ComputeGraph> {
        build_residual_graph(self.config.layers, self.config.heads)
    }

    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_embed, &self.pos_embed];
        for b in &self.blocks {
            out.extend([&b.ln1_g, &b.ln1_b]);
            for h in &b.heads {
                out.extend([&h.wq, &h.wk, &h.wv, &h.wo]);
            }
            out.extend([&b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.unembed, &self.unembed_b]);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend([&mut b.ln1_g, &mut b.ln1_b]);
            for h in &mut b.heads {
                out.extend([&mut h.wq, &mut h.wk, &mut h.wv, &mut h.wo]);
            }
            out.extend([
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.unembed,
            &mut self.unembed_b,
        ]);
        out
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut out = vec!["tok_embed".to_string(), "pos_embed".to_string()];
        for l in 0..self.config.layers {
            out.extend([format!("L{l}.ln1.g"), format!("L{l}.ln1.b")]);
            for h in 0..self.config.heads {
                for m in ["q", "k", "v", "o"] {
                    out.push(format!("L{l}.H{h}.W{m}"));
                }
            }
            for m in ["ln2.g", "ln2.b", "mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2"] {
                out.push(format!("L{l}.{m}"));
            }
        }
        out.extend(["lnf.g", "lnf.b", "unembed.W", "unembed.b"].map(String::from));
        out
    }

    fn mean_groups(&self) -> Vec<MeanGroup> {
        let mut nodes = vec![NodeId::Input(0)];
        for layer in 0..self.config.layers {
            nodes.extend((0..self.config.heads).map(|head| NodeId::AttnHead { layer, head }));
            nodes.push(NodeId::Mlp(layer));
        }
        nodes
            .into_iter()
            .map(|n| MeanGroup {
                nodes: vec![n],
                width: self.config.d_model,
            })
            .collect()
    }

    fn record(&self, tape: &mut Tape, params: &[Var], wiring: &Wiring) -> Result<StreamVars> {
        if params.len() != self.parameters().len() {
            return Err(Error::usage("parameter slots do not match the model"));
        }
        let inputs = tape.leaf("inputs");
        let positions = tape.leaf("positions");
        let targets = tape.leaf("targets");
        let weights = tape.leaf("weights");
        let tok = tape.embedding(params[0], inputs);
        let pos = tape.embedding(params[1], positions);
        let embed = tape.add(tok, pos);
        let blocks = self.block_slots();

        let (logits, activations) = match wiring {
            Wiring::Plain => {
                let mut r = embed;
                for slots in &blocks {
                    let x = tape.layer_norm(r, params[slots.ln1.0], params[slots.ln1.1], LN_EPS);
                    for &h in &slots.heads {
                        let o = self.head_out(tape, x, params, h);
                        r = tape.add(r, o);
                    }
                    let x = tape.layer_norm(r, params[slots.ln2.0], params[slots.ln2.1], LN_EPS);
                    let m = self.mlp_out(tape, x, params, slots.mlp);
                    r = tape.add(r, m);
                }
                (self.unembed_out(tape, r, params), Vec::new())
            }
            Wiring::Rewired { mask, means } => {
                let graph = self.graph()?;
                let groups = self.mean_groups();
                if means.len() != groups.len() {
                    return Err(Error::usage("mean slots do not match the model"));
                }
                let group_of: HashMap<NodeId, usize> = groups
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (g.nodes[0], i))
                    .collect();
                let mut values: HashMap<NodeId, Var> = HashMap::new();
                let mut logits = None;
                for &node in graph.nodes() {
                    if node == NodeId::Input(0) {
                        values.insert(node, embed);
                        continue;
                    }
                    let terms = graph
                        .incoming(&node)
                        .iter()
                        .map(|&e| {
                            let src = graph.edges()[e].src;
                            MixTerm {
                                value: values[&src],
                                mean: means[group_of[&src]],
                                edge: e,
                            }
                        })
                        .collect();
                    let s = tape.edge_mix(*mask, terms);
                    match node {
                        NodeId::AttnHead { layer, head } => {
                            let slots = &blocks[layer];
                            let x = tape.layer_norm(
                                s,
                                params[slots.ln1.0],
                                params[slots.ln1.1],
                                LN_EPS,
                            );
                            let o = self.head_out(tape, x, params, slots.heads[head]);
                            values.insert(node, o);
                        }
                        NodeId::Mlp(layer) => {
                            let slots = &blocks[layer];
                            let x = tape.layer_norm(
                                s,
                                params[slots.ln2.0],
                                params[slots.ln2.1],
                                LN_EPS,
                            );
                            let o = self.mlp_out(tape, x, params, slots.mlp);
                            values.insert(node, o);
                        }
                        NodeId::Output => logits = Some(self.unembed_out(tape, s, params)),
                        other => {
                            return Err(Error::Structural(format!(
                                "unexpected node {other} in a residual graph"
                            )))
                        }
                    }
                }
                let logits = logits.ok_or_else(|| Error::Structural("graph has no output".into()))?;
                let activations = groups.iter().map(|g| values[&g.nodes[0]]).collect();
                (logits, activations)
            }
        };
        let loss = tape.cross_entropy(logits, targets, weights);
        Ok(StreamVars {
            inputs,
            positions: Some(positions),
            targets,
            weights,
            logits,
            loss,
            activations,
        })
    }
}
