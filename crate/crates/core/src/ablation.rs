// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ablation values and forward passes through a partially ablated graph.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, NodeId};
use crate::io::ByteReader;
use crate::mask::EdgeMask;
use crate::metrics::EVAL_CHUNK;
use crate::models::Network;
use crate::program::{predict, Ablation, Program, Trainable};
use crate::tape::Bindings;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Ablated edges carry zeros.
    Zero,
    /// Ablated edges carry the source node's mean activation.
    Mean,
}

impl AblationKind {
    pub fn tag(self) -> &'static str {
        match self {
            AblationKind::Zero => "zero",
            AblationKind::Mean => "mean",
        }
    }
}

/// The value each source node transmits along an ablated edge.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationStore {
    kind: AblationKind,
    graph_hash: String,
    values: BTreeMap<NodeId, Tensor>,
}

const STORE_MAGIC: &[u8; 4] = b"CCAB";
const STORE_VERSION: u32 = 1;

impl AblationStore {
    /// All-zero values for every source node of `graph`.
    pub fn zeros<N: Network>(model: &N, graph: &ComputeGraph) -> Result<Self> {
        let groups = model.mean_groups();
        let tensors = groups.iter().map(|g| Tensor::zeros(&[g.width])).collect();
        Self::from_groups(AblationKind::Zero, model, graph, tensors)
    }

    fn from_groups<N: Network>(
        kind: AblationKind,
        model: &N,
        graph: &ComputeGraph,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        check_model_graph(model, graph)?;
        let mut values = BTreeMap::new();
        for (group, t) in model.mean_groups().iter().zip(tensors) {
            if group.nodes.len() == 1 {
                values.insert(group.nodes[0], t);
            } else {
                for (node, &v) in group.nodes.iter().zip(t.data()) {
                    values.insert(*node, Tensor::vector(vec![v]));
                }
            }
        }
        Ok(Self {
            kind,
            graph_hash: graph.structural_hash().to_string(),
            values,
        })
    }

    pub fn kind(&self) -> AblationKind {
        self.kind
    }

    pub fn graph_hash(&self) -> &str {
        &self.graph_hash
    }

    pub fn get(&self, node: &NodeId) -> Option<&Tensor> {
        self.values.get(node)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values laid out per mean group of `model`, ready to bind to a tape.
    pub fn group_tensors<N: Network>(&self, model: &N) -> Result<Vec<Tensor>> {
        model
            .mean_groups()
            .iter()
            .map(|g| {
                let lookup = |n: &NodeId| {
                    self.values.get(n).ok_or_else(|| {
                        Error::usage(format!("ablation store has no value for node {n}"))
                    })
                };
                if g.nodes.len() == 1 {
                    let t = lookup(&g.nodes[0])?;
                    if t.numel() != g.width {
                        return Err(Error::shape(
                            "ablation_store",
                            format!("node {} holds {} values, expected {}", g.nodes[0], t.numel(), g.width),
                        ));
                    }
                    Ok(t.clone())
                } else {
                    let data = g
                        .nodes
                        .iter()
                        .map(|n| lookup(n).and_then(|t| t.item()))
                        .collect::<Result<Vec<f64>>>()?;
                    Ok(Tensor::vector(data))
                }
            })
            .collect()
    }

    fn check_graph(&self, graph: &ComputeGraph) -> Result<()> {
        if self.graph_hash != graph.structural_hash() {
            return Err(Error::usage(format!(
                "ablation store belongs to graph {}, not {}",
                self.graph_hash,
                graph.structural_hash()
            )));
        }
        Ok(())
    }

    /// Binary encoding: magic, version, kind, graph hash, then each node's
    /// id and values as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.push(match self.kind {
            AblationKind::Zero => 0,
            AblationKind::Mean => 1,
        });
        put_bytes(&mut out, self.graph_hash.as_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for (node, t) in &self.values {
            let (tag, a, b) = encode_node(node);
            out.push(tag);
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(4)? != STORE_MAGIC {
            return Err(r.error(0, "not an ablation store (bad magic)"));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(r.error(4, format!("unsupported store version {version}")));
        }
        let kind = match r.take(1)?[0] {
            0 => AblationKind::Zero,
            1 => AblationKind::Mean,
            k => return Err(r.error(8, format!("unknown ablation kind {k}"))),
        };
        let hash_len = r.u64()? as usize;
        let graph_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| r.error(r.pos(), "graph hash is not UTF-8"))?;
        let count = r.u64()?;
        let mut values = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos();
            let tag = r.take(1)?[0];
            let (a, b) = (r.u64()?, r.u64()?);
            let node = decode_node(tag, a as usize, b as usize)
                .ok_or_else(|| r.error(at, format!("unknown node tag {tag}")))?;
            let n = r.u64()? as usize;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            values.insert(node, Tensor::vector(data));
        }
        r.finish()?;
        Ok(Self {
            kind,
            graph_hash,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn encode_node(node: &NodeId) -> (u8, u64, u64) {
    match *node {
        NodeId::Input(i) => (0, i as u64, 0),
        NodeId::Hidden { layer, index } => (1, layer as u64, index as u64),
        NodeId::OutputUnit(k) => (2, k as u64, 0),
        NodeId::AttnHead { layer, head } => (3, layer as u64, head as u64),
        NodeId::Mlp(l) => (4, l as u64, 0),
        NodeId::Output => (5, 0, 0),
    }
}

fn decode_node(tag: u8, a: usize, b: usize) -> Option<NodeId> {
    Some(match tag {
        0 => NodeId::Input(a),
        1 => NodeId::Hidden { layer: a, index: b },
        2 => NodeId::OutputUnit(a),
        3 => NodeId::AttnHead { layer: a, head: b },
        4 => NodeId::Mlp(a),
        5 => NodeId::Output,
        _ => return None,
    })
}

fn check_model_graph<N: Network>(model: &N, graph: &ComputeGraph) -> Result<()> {
    let own = model.graph()?;
    if own.structural_hash() != graph.structural_hash() {
        return Err(Error::usage(format!(
            "model graph {} does not match graph {}",
            own.structural_hash(),
            graph.structural_hash()
        )));
    }
    Ok(())
}

/// Mean activation of every source node over `dataset`, computed on the
/// unablated model. Sequence models average over samples and positions.
pub fn compute_node_means<N: Network>(
    graph: &ComputeGraph,
    model: &N,
    dataset: &Dataset,
) -> Result<AblationStore> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot compute means over an empty dataset"));
    }
    check_model_graph(model, graph)?;
    let groups = model.mean_groups();
    let mut program = Program::rewired(model, 1, Trainable::Nothing)?;
    let ones = Tensor::ones(&[graph.num_edges()]);
    let placeholder: Vec<Tensor> = groups.iter().map(|g| Tensor::zeros(&[g.width])).collect();
    let params = model.parameters();
    let mut sums: Vec<Vec<f64>> = groups.iter().map(|g| vec![0.0; g.width]).collect();
    let mut rows = 0usize;
    for batch in dataset.chunks(EVAL_CHUNK) {
        let mut b = Bindings::new();
        program.bind_parameters(&mut b, &params)?;
        program.bind_ablation(&mut b, &ones, &placeholder)?;
        program.bind_batch(&mut b, 0, &batch)?;
        program.forward(&b)?;
        for (g, &var) in program.stream(0).activations.iter().enumerate() {
            let act = program.value(var)?;
            let width = act.last_dim();
            for row in act.data().chunks(width) {
                for (s, v) in sums[g].iter_mut().zip(row) {
                    *s += v;
                }
            }
            if g == 0 {
                rows += act.rows();
            }
        }
    }
    let tensors = sums
        .into_iter()
        .map(|s| Tensor::vector(s.into_iter().map(|v| v / rows as f64).collect()))
        .collect();
    AblationStore::from_groups(AblationKind::Mean, model, graph, tensors)
}

/// Builds the requested store: zeros, or means over `dataset`.
pub fn build_store<N: Network>(
    kind: AblationKind,
    graph: &ComputeGraph,
    model: &N,
    dataset: &Dataset,
) -> Result<AblationStore> {
    match kind {
        AblationKind::Zero => AblationStore::zeros(model, graph),
        AblationKind::Mean => compute_node_means(graph, model, dataset),
    }
}

fn check_mask(graph: &ComputeGraph, mask: &EdgeMask) -> Result<()> {
    if mask.graph_hash() != graph.structural_hash() {
        return Err(Error::usage(format!(
            "mask belongs to graph {}, not {}",
            mask.graph_hash(),
            graph.structural_hash()
        )));
    }
    if mask.len() != graph.num_edges() {
        return Err(Error::usage(format!(
            "mask has {} weights for {} edges",
            mask.len(),
            graph.num_edges()
        )));
    }
    if mask.weights().iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::usage("mask weights must lie in [0, 1]"));
    }
    Ok(())
}

/// Logits of the model with every edge mixing its source value and the
/// stored ablation value according to `mask`.
pub fn masked_forward<N: Network>(
    graph: &ComputeGraph,
    model: &N,
    mask: &EdgeMask,
    store: &AblationStore,
    batch: &Batch,
) -> Result<Tensor> {
    check_mask(graph, mask)?;
    store.check_graph(graph)?;
    let means = store.group_tensors(model)?;
    let weights = mask.to_tensor();
    predict(
        model,
        batch,
        Some(Ablation {
            mask: &weights,
            means: &means,
        }),
    )
}

/// The mask that ablates exactly the edges at `ablated` and keeps all others.
pub fn indicator_mask(graph: &ComputeGraph, ablated: &BTreeSet<usize>) -> Result<EdgeMask> {
    if let Some(&bad) = ablated.iter().find(|&&i| i >= graph.num_edges()) {
        return Err(Error::usage(format!(
            "edge index {bad} out of range for {} edges",
            graph.num_edges()
        )));
    }
    let weights = (0..graph.num_edges())
        .map(|i| if ablated.contains(&i) { 0.0 } else { 1.0 })
        .collect();
    EdgeMask::new(graph, weights)
}

/// Logits with the edges at `ablated` fully ablated.
pub fn hard_ablate_forward<N: Network>(
    graph: &ComputeGraph,
    model: &N,
    ablated: &BTreeSet<usize>,
    store: &AblationStore,
    batch: &Batch,
) -> Result<Tensor> {
    let mask = indicator_mask(graph, ablated)?;
    masked_forward(graph, model, &mask, store, batch)
}
