// SPDX-License-Identifier: MIT OR Apache-2.0

//! Computational graphs: nodes are units of computation, edges are the
//! node-to-node dependencies that an edit may ablate.
//!
//! Two granularities are supported. A per-weight graph has one node per
//! input feature, hidden neuron and output neuron of an MLP and one edge per
//! weight. A residual-rewrite graph has one node per attention head, per MLP
//! block, plus the embedding input and the unembedding output; every
//! component reads every earlier component's output as a separate argument,
//! except heads of the same layer which run in parallel.
//!
//! Edges are kept in a canonical order (destination in topological order,
//! then source in topological order). Mask files address edges by position,
//! so that order is part of the on-disk contract.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Identity of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    /// A model input. Per-weight graphs have one per feature; the residual
    /// rewrite has a single `Input(0)` holding the embeddings.
    Input(usize),
    /// Hidden neuron `index` of hidden layer `layer` (per-weight graphs).
    Hidden { layer: usize, index: usize },
    /// Output neuron (per-weight graphs).
    OutputUnit(usize),
    /// Attention head `head` of layer `layer` (residual rewrite).
    AttnHead { layer: usize, head: usize },
    /// MLP block of a layer (residual rewrite).
    Mlp(usize),
    /// The unembedding node (residual rewrite).
    Output,
}

impl NodeId {
    pub fn is_input(&self) -> bool {
        matches!(self, NodeId::Input(_))
    }

    pub fn is_output(&self) -> bool {
        matches!(self, NodeId::OutputUnit(_) | NodeId::Output)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Input(i) => write!(f, "I{i}"),
            NodeId::Hidden { layer, index } => write!(f, "H{layer}.{index}"),
            NodeId::OutputUnit(k) => write!(f, "Y{k}"),
            NodeId::AttnHead { layer, head } => write!(f, "A{layer}.{head}"),
            NodeId::Mlp(layer) => write!(f, "M{layer}"),
            NodeId::Output => write!(f, "O"),
        }
    }
}

/// A directed dependency `src -> dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

/// How a model was turned into a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerWeight { layer_dims: Vec<usize> },
    ResidualRewrite { layers: usize, heads: usize },
}

impl Granularity {
    pub fn tag(&self) -> &'static str {
        match self {
            Granularity::PerWeight { .. } => "per_weight",
            Granularity::ResidualRewrite { .. } => "residual_rewrite",
        }
    }
}

/// An immutable DAG with canonically ordered edges.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    granularity: Granularity,
    nodes: Vec<NodeId>,
    edges: Vec<Edge>,
    position: HashMap<NodeId, usize>,
    edge_index: HashMap<Edge, usize>,
    /// Edge indices entering each node, ordered by source position.
    incoming: Vec<Vec<usize>>,
    hash: String,
}

impl ComputeGraph {
    /// Assembles a graph from nodes in topological order and an edge list,
    /// sorting the edges canonically.
    fn assemble(granularity: Granularity, nodes: Vec<NodeId>, mut edges: Vec<Edge>) -> Result<Self> {
        let position: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        if position.len() != nodes.len() {
            return Err(Error::Structural("duplicate node ids".into()));
        }
        for e in &edges {
            let (Some(s), Some(d)) = (position.get(&e.src), position.get(&e.dst)) else {
                return Err(Error::Structural(format!("edge {e} references unknown node")));
            };
            if s >= d {
                return Err(Error::Structural(format!("edge {e} does not go forward")));
            }
        }
        edges.sort_by_key(|e| (position[&e.dst], position[&e.src]));
        let edge_index: HashMap<Edge, usize> =
            edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        if edge_index.len() != edges.len() {
            return Err(Error::Structural("duplicate edges".into()));
        }
        let mut incoming = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            incoming[position[&e.dst]].push(i);
        }
        let hash = structural_hash(&granularity, &nodes, &edges, &position);
        let graph = Self {
            granularity,
            nodes,
            edges,
            position,
            edge_index,
            incoming,
            hash,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn granularity(&self) -> &Granularity {
        &self.granularity
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Hex digest of the granularity, node list and edge list.
    pub fn structural_hash(&self) -> &str {
        &self.hash
    }

    pub fn position(&self, node: &NodeId) -> Option<usize> {
        self.position.get(node).copied()
    }

    pub fn edge_index(&self, edge: &Edge) -> Option<usize> {
        self.edge_index.get(edge).copied()
    }

    /// Indices of the edges entering `node`, in source order.
    pub fn incoming(&self, node: &NodeId) -> &[usize] {
        self.position(node)
            .map(|p| self.incoming[p].as_slice())
            .unwrap_or(&[])
    }

    /// Resolves a list of edges to canonical indices, rejecting unknown edges.
    pub fn indices_of(&self, edges: &[Edge]) -> Result<BTreeSet<usize>> {
        edges
            .iter()
            .map(|e| {
                self.edge_index(e)
                    .ok_or_else(|| Error::usage(format!("edge {e} is not in the graph")))
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let mut has_in = vec![false; self.nodes.len()];
        let mut has_out = vec![false; self.nodes.len()];
        for e in &self.edges {
            has_out[self.position[&e.src]] = true;
            has_in[self.position[&e.dst]] = true;
            if let (
                NodeId::AttnHead { layer: a, .. },
                NodeId::AttnHead { layer: b, .. },
            ) = (e.src, e.dst)
            {
                if a == b {
                    return Err(Error::Structural(format!("same-layer head edge {e}")));
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !has_in[i] && !n.is_input() {
                return Err(Error::Structural(format!("{n} is a source but not an input")));
            }
            if !has_out[i] && !n.is_output() {
                return Err(Error::Structural(format!("{n} is a sink but not an output")));
            }
        }
        Ok(())
    }
}

fn structural_hash(
    granularity: &Granularity,
    nodes: &[NodeId],
    edges: &[Edge],
    position: &HashMap<NodeId, usize>,
) -> String {
    let mut h = Sha256::new();
    h.update(granularity.tag().as_bytes());
    h.update(b"\n");
    for n in nodes {
        h.update(n.to_string().as_bytes());
        h.update(b";");
    }
    h.update(b"\n");
    for e in edges {
        h.update((position[&e.src] as u64).to_le_bytes());
        h.update((position[&e.dst] as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Per-weight graph of a fully connected network: one node per unit, one
/// edge per weight. Biases are internal to their node.
pub fn build_mlp_graph(layer_dims: &[usize]) -> Result<ComputeGraph> {
    if layer_dims.len() < 2 {
        return Err(Error::usage(format!(
            "an MLP graph needs at least two layers, got {layer_dims:?}"
        )));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::usage(format!("layer sizes must be positive: {layer_dims:?}")));
    }
    let last = layer_dims.len() - 1;
    let layer_nodes = |l: usize| -> Vec<NodeId> {
        (0..layer_dims[l])
            .map(|i| match l {
                0 => NodeId::Input(i),
                l if l == last => NodeId::OutputUnit(i),
                l => NodeId::Hidden {
                    layer: l - 1,
                    index: i,
                },
            })
            .collect()
    };
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for l in 0..=last {
        let current = layer_nodes(l);
        if l > 0 {
            let prev = layer_nodes(l - 1);
            for &dst in &current {
                edges.extend(prev.iter().map(|&src| Edge { src, dst }));
            }
        }
        nodes.extend(current);
    }
    ComputeGraph::assemble(
        Granularity::PerWeight {
            layer_dims: layer_dims.to_vec(),
        },
        nodes,
        edges,
    )
}

/// Residual rewrite of a pre-norm transformer with `layers` blocks of
/// `heads` attention heads and one MLP each.
pub fn build_residual_graph(layers: usize, heads: usize) -> Result<ComputeGraph> {
    if layers == 0 || heads == 0 {
        return Err(Error::usage(format!(
            "residual graph needs at least one layer and head, got {layers}x{heads}"
        )));
    }
    let mut nodes = vec![NodeId::Input(0)];
    for layer in 0..layers {
        nodes.extend((0..heads).map(|head| NodeId::AttnHead { layer, head }));
        nodes.push(NodeId::Mlp(layer));
    }
    nodes.push(NodeId::Output);

    let heads_of = |layer: usize| (0..heads).map(move |head| NodeId::AttnHead { layer, head });
    let mut edges = Vec::new();
    for layer in 0..layers {
        // Heads read the input plus every component of earlier layers.
        let mut head_sources = vec![NodeId::Input(0)];
        for earlier in 0..layer {
            head_sources.extend(heads_of(earlier));
            head_sources.push(NodeId::Mlp(earlier));
        }
        for dst in heads_of(layer) {
            edges.extend(head_sources.iter().map(|&src| Edge { src, dst }));
        }
        // The MLP additionally reads the heads of its own layer.
        let mut mlp_sources = head_sources;
        mlp_sources.extend(heads_of(layer));
        let dst = NodeId::Mlp(layer);
        edges.extend(mlp_sources.iter().map(|&src| Edge { src, dst }));
    }
    let out_sources: Vec<NodeId> = nodes[..nodes.len() - 1].to_vec();
    edges.extend(out_sources.into_iter().map(|src| Edge {
        src,
        dst: NodeId::Output,
    }));
    ComputeGraph::assemble(Granularity::ResidualRewrite { layers, heads }, nodes, edges)
}

/// Closed-form edge count of the residual rewrite.
pub fn residual_edge_count(layers: usize, heads: usize) -> usize {
    let head_edges: usize = (0..layers).map(|i| heads * (1 + (heads + 1) * i)).sum();
    let mlp_edges: usize = (0..layers).map(|i| 1 + i + heads * (i + 1)).sum();
    head_edges + mlp_edges + (1 + layers * heads + layers)
}

/// Deterministic topological order (Kahn's algorithm, ties broken by the
/// graph's layer-major node order).
pub fn topological_order(graph: &ComputeGraph) -> Result<Vec<NodeId>> {
    let n = graph.num_nodes();
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for e in graph.edges() {
        let (s, d) = (graph.position[&e.src], graph.position[&e.dst]);
        indegree[d] += 1;
        children[s].push(d);
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(graph.nodes[i]);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() != n {
        return Err(Error::Structural("cycle detected".into()));
    }
    Ok(order)
}

/// Graphviz rendering. Ablated edges are red, attention heads grey and MLP
/// blocks purple.
pub fn export_dot(graph: &ComputeGraph, ablated: &[Edge]) -> Result<String> {
    let ablated = graph.indices_of(ablated)?;
    let mut out = String::new();
    writeln!(out, "digraph circuit {{").unwrap();
    writeln!(out, "  // graph {}", graph.structural_hash()).unwrap();
    writeln!(out, "  rankdir=BT;").unwrap();
    writeln!(out, "  node [shape=circle, style=filled, fillcolor=white];").unwrap();
    for n in graph.nodes() {
        let fill = match n {
            NodeId::AttnHead { .. } => "grey",
            NodeId::Mlp(_) => "purple",
            _ => "white",
        };
        writeln!(out, "  \"{n}\" [fillcolor={fill}];").unwrap();
    }
    for (i, e) in graph.edges().iter().enumerate() {
        if ablated.contains(&i) {
            writeln!(out, "  \"{}\" -> \"{}\" [color=red, penwidth=2];", e.src, e.dst).unwrap();
        } else {
            writeln!(out, "  \"{}\" -> \"{}\";", e.src, e.dst).unwrap();
        }
    }
    writeln!(out, "}}").unwrap();
    Ok(out)
}
