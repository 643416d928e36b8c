// SPDX-License-Identifier: MIT OR Apache-2.0

//! Define-then-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a static list of primitive operations recorded once through
//! the builder methods. Each call to [`Tape::evaluate`] binds fresh values to
//! the leaf slots, runs the ops in recording order and keeps the values needed
//! by [`Tape::backpropagate`]. Recording order is topological by
//! construction: an op can only refer to vars that already exist.
//!
//! The primitive set is closed: matrix multiply, add, subtract, multiply,
//! affine scalar scale, ReLU, GELU, softmax, layer norm, embedding lookup,
//! causal self-attention, cross-entropy, square root, clamp, sum, contiguous
//! segment, and the two edge-mixing ops that realize
//! `w * v + (1 - w) * mu` per graph edge.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of an [`Op::EdgeMix`]: the source value, its ablation value and
/// the position of the edge inside the mask vector.
#[derive(Debug, Clone, Copy)]
pub struct MixTerm {
    pub value: Var,
    pub mean: Var,
    pub edge: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f64, shift: f64 },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Embedding { table: Var, ids: Var },
    CausalAttention { q: Var, k: Var, v: Var, seq_len: usize },
    CrossEntropy { logits: Var, targets: Var, weights: Var },
    Sqrt { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum { a: Var },
    Segment { a: Var, start: usize, shape: Vec<usize> },
    EdgeMix { mask: Var, terms: Vec<MixTerm> },
    MaskedLinear { x: Var, mean: Var, weight: Var, mask: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sqrt { .. } => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Segment { .. } => "segment",
            Op::EdgeMix { .. } => "edge_mix",
            Op::MaskedLinear { .. } => "masked_linear",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Affine { a, .. }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::Sqrt { a }
            | Op::Clamp { a, .. }
            | Op::Sum { a }
            | Op::Segment { a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, ids } => vec![*table, *ids],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => vec![*logits, *targets, *weights],
            Op::EdgeMix { mask, terms } => {
                let mut v = vec![*mask];
                for t in terms {
                    v.push(t.value);
                    v.push(t.mean);
                }
                v
            }
            Op::MaskedLinear {
                x,
                mean,
                weight,
                mask,
            } => vec![*x, *mean, *weight, *mask],
        }
    }
}

/// Values an op keeps from its forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
enum Saved {
    #[default]
    Nothing,
    Probs(Vec<f64>),
    Norm { xhat: Vec<f64>, rstd: Vec<f64> },
}

/// Values bound to leaf slots for one evaluation.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    values: HashMap<Var, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, slot: Var, value: &'a Tensor) -> &mut Self {
        self.values.insert(slot, value);
        self
    }

    pub fn with(mut self, slot: Var, value: &'a Tensor) -> Self {
        self.values.insert(slot, value);
        self
    }

    pub fn get(&self, slot: Var) -> Option<&'a Tensor> {
        self.values.get(&slot).copied()
    }
}

/// A recorded computation with reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    trainable: Vec<bool>,
    outputs: Vec<Var>,
    values: Vec<Option<Tensor>>,
    saved: Vec<Saved>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.ops.len()));
        self.ops.push(op);
        self.trainable.push(false);
        self.values.push(None);
        self.saved.push(Saved::Nothing);
        Var(self.ops.len() - 1)
    }

    /// Records a leaf slot whose value is supplied through [`Bindings`].
    pub fn leaf(&mut self, name: impl Into<String>) -> Var {
        self.push(Op::Leaf { name: name.into() })
    }

    /// Records a trainable leaf slot.
    pub fn param(&mut self, name: impl Into<String>) -> Var {
        let v = self.leaf(name);
        self.trainable[v.0] = true;
        v
    }

    /// Marks or unmarks a leaf as trainable.
    pub fn set_trainable(&mut self, slot: Var, trainable: bool) -> Result<()> {
        match self.ops.get(slot.0) {
            Some(Op::Leaf { .. }) => {
                self.trainable[slot.0] = trainable;
                Ok(())
            }
            _ => Err(Error::usage(format!("{slot:?} is not a leaf slot"))),
        }
    }

    pub fn is_trainable(&self, slot: Var) -> bool {
        self.trainable.get(slot.0).copied().unwrap_or(false)
    }

    /// Trainable leaf slots in recording order.
    pub fn trainable_slots(&self) -> Vec<Var> {
        (0..self.ops.len())
            .filter(|&i| self.trainable[i])
            .map(Var)
            .collect()
    }

    pub fn leaf_name(&self, slot: Var) -> Option<&str> {
        match self.ops.get(slot.0) {
            Some(Op::Leaf { name }) => Some(name),
            _ => None,
        }
    }

    /// Marks a var as an output returned by [`Tape::evaluate`].
    pub fn mark_output(&mut self, var: Var) {
        if !self.outputs.contains(&var) {
            self.outputs.push(var);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul {
            a,
            b,
            trans_b: false,
        })
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul {
            a,
            b,
            trans_b: true,
        })
    }

    /// Elementwise sum; `b` may also be a row vector broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul { a, b })
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.push(Op::Affine { a, scale, shift })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.push(Op::Gelu { a })
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.push(Op::Softmax { a })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        self.push(Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        })
    }

    /// Row lookup: `ids` holds integral indices into the rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: Var) -> Var {
        self.push(Op::Embedding { table, ids })
    }

    /// Causal softmax attention over consecutive blocks of `seq_len` rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Var {
        self.push(Op::CausalAttention { q, k, v, seq_len })
    }

    /// Weighted mean cross-entropy `sum_i w_i * CE_i / sum_i w_i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Var, weights: Var) -> Var {
        self.push(Op::CrossEntropy {
            logits,
            targets,
            weights,
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.push(Op::Clamp { a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum { a })
    }

    /// The contiguous elements `[start, start + prod(shape))` of `a` viewed as `shape`.
    pub fn segment(&mut self, a: Var, start: usize, shape: Vec<usize>) -> Var {
        self.push(Op::Segment { a, start, shape })
    }

    /// `sum_k mask[e_k] * value_k + (1 - mask[e_k]) * mean_k`; means broadcast over rows.
    pub fn edge_mix(&mut self, mask: Var, terms: Vec<MixTerm>) -> Var {
        self.push(Op::EdgeMix { mask, terms })
    }

    /// `y[n, j] = sum_i weight[j, i] * (mask[j, i] * x[n, i] + (1 - mask[j, i]) * mean[i])`.
    pub fn masked_linear(&mut self, x: Var, mean: Var, weight: Var, mask: Var) -> Var {
        self.push(Op::MaskedLinear {
            x,
            mean,
            weight,
            mask,
        })
    }

    /// Value of a var from the last evaluation.
    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.values
            .get(var.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::usage(format!("{var:?} has no value; evaluate the tape first")))
    }

    /// Drops all values from the previous evaluation.
    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = None);
        self.saved.iter_mut().for_each(|s| *s = Saved::Nothing);
    }

    /// Runs the forward pass and returns the marked outputs.
    pub fn evaluate(&mut self, bindings: &Bindings<'_>) -> Result<HashMap<Var, Tensor>> {
        self.clear();
        for i in 0..self.ops.len() {
            let (value, saved) = self.forward_op(i, bindings)?;
            if !value.all_finite() {
                return Err(Error::NumericOverflow {
                    op: self.ops[i].name(),
                    node: i,
                });
            }
            self.values[i] = Some(value);
            self.saved[i] = saved;
        }
        Ok(self
            .outputs
            .iter()
            .map(|&o| (o, self.values[o.0].clone().expect("evaluated")))
            .collect())
    }

    fn val(&self, v: Var) -> &Tensor {
        self.values[v.0].as_ref().expect("inputs precede their consumers")
    }

    fn forward_op(&self, i: usize, bindings: &Bindings<'_>) -> Result<(Tensor, Saved)> {
        let op = &self.ops[i];
        let name = op.name();
        let out = match op {
            Op::Leaf { name } => {
                let t = bindings.get(Var(i)).ok_or_else(|| {
                    Error::usage(format!("leaf slot `{name}` ({:?}) is not bound", Var(i)))
                })?;
                return Ok(((*t).clone(), Saved::Nothing));
            }
            Op::MatMul { a, b, trans_b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(Error::shape(
                        name,
                        format!("needs matrices, got {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let (kb, n) = if *trans_b {
                    (b.shape()[1], b.shape()[0])
                } else {
                    (b.shape()[0], b.shape()[1])
                };
                if k != kb {
                    return Err(Error::shape(
                        name,
                        format!(
                            "{:?} x {:?}{} has mismatched inner dims",
                            a.shape(),
                            b.shape(),
                            if *trans_b { "^T" } else { "" }
                        ),
                    ));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), *trans_b, &mut out, false);
                Tensor::new(vec![m, n], out)?
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Add { .. }) { 1.0 } else { -1.0 };
                let (a, b) = (self.val(*a), self.val(*b));
                let mut out = a.clone();
                if a.shape() == b.shape() {
                    out.axpy(sign, b);
                } else if b.rank() == 1 && b.numel() == a.last_dim() && a.rank() >= 1 {
                    let d = b.numel();
                    for row in out.data_mut().chunks_mut(d) {
                        for (o, bv) in row.iter_mut().zip(b.data()) {
                            *o += sign * bv;
                        }
                    }
                } else {
                    return Err(Error::shape(
                        name,
                        format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
                    ));
                }
                out
            }
            Op::Mul { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                same_shape(name, a, b)?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Affine { a, scale, shift } => self.val(*a).map(|x| scale * x + shift),
            Op::Relu { a } => self.val(*a).map(|x| x.max(0.0)),
            Op::Gelu { a } => self.val(*a).map(gelu),
            Op::Softmax { a } => {
                let a = self.val(*a);
                let d = a.last_dim();
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(d.max(1)) {
                    softmax_in_place(row);
                }
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (x, g, b) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let d = x.last_dim();
                if g.numel() != d || b.numel() != d {
                    return Err(Error::shape(
                        name,
                        format!(
                            "input {:?} with gamma {:?} and beta {:?}",
                            x.shape(),
                            g.shape(),
                            b.shape()
                        ),
                    ));
                }
                let rows = x.rows();
                let mut out = vec![0.0; x.numel()];
                let mut xhat = vec![0.0; x.numel()];
                let mut rstd = vec![0.0; rows];
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let rs = 1.0 / (var + eps).sqrt();
                    rstd[r] = rs;
                    for c in 0..d {
                        let h = (row[c] - mean) * rs;
                        xhat[r * d + c] = h;
                        out[r * d + c] = g.data()[c] * h + b.data()[c];
                    }
                }
                return Ok((
                    Tensor::new(x.shape().to_vec(), out)?,
                    Saved::Norm { xhat, rstd },
                ));
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (self.val(*table), self.val(*ids));
                if table.rank() != 2 {
                    return Err(Error::shape(name, format!("table {:?}", table.shape())));
                }
                let (v, d) = (table.shape()[0], table.shape()[1]);
                let mut out = Vec::with_capacity(ids.numel() * d);
                for &id in ids.data() {
                    let row = index_of(name, id, v)?;
                    out.extend_from_slice(table.row(row));
                }
                Tensor::new(vec![ids.numel(), d], out)?
            }
            Op::CausalAttention { q, k, v, seq_len } => {
                let (q, k, v) = (self.val(*q), self.val(*k), self.val(*v));
                let (out, probs) = attention_forward(q, k, v, *seq_len)?;
                return Ok((out, Saved::Probs(probs)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let (l, t, w) = (self.val(*logits), self.val(*targets), self.val(*weights));
                let (n, c) = (l.rows(), l.last_dim());
                if t.numel() != n || w.numel() != n {
                    return Err(Error::shape(
                        name,
                        format!(
                            "logits {:?}, targets {:?}, weights {:?}",
                            l.shape(),
                            t.shape(),
                            w.shape()
                        ),
                    ));
                }
                let total_w: f64 = w.data().iter().sum();
                if total_w <= 0.0 {
                    return Err(Error::usage("cross-entropy weights sum to zero"));
                }
                let mut probs = l.data().to_vec();
                let mut loss = 0.0;
                for r in 0..n {
                    let row = &mut probs[r * c..(r + 1) * c];
                    let lse = log_sum_exp(row);
                    let target = index_of(name, t.data()[r], c)?;
                    loss += w.data()[r] * (lse - row[target]);
                    for p in row.iter_mut() {
                        *p = (*p - lse).exp();
                    }
                }
                return Ok((Tensor::scalar(loss / total_w), Saved::Probs(probs)));
            }
            Op::Sqrt { a } => self.val(*a).map(f64::sqrt),
            Op::Clamp { a, lo, hi } => self.val(*a).map(|x| x.clamp(*lo, *hi)),
            Op::Sum { a } => Tensor::scalar(self.val(*a).sum()),
            Op::Segment { a, start, shape } => {
                let a = self.val(*a);
                let numel: usize = shape.iter().product();
                if start + numel > a.numel() {
                    return Err(Error::shape(
                        name,
                        format!("[{start}, {}) exceeds {:?}", start + numel, a.shape()),
                    ));
                }
                Tensor::new(shape.clone(), a.data()[*start..start + numel].to_vec())?
            }
            Op::EdgeMix { mask, terms } => {
                let mask = self.val(*mask);
                let first = terms
                    .first()
                    .ok_or_else(|| Error::shape(name, "edge mix needs at least one term"))?;
                let shape = self.val(first.value).shape().to_vec();
                let mut out = vec![0.0; shape.iter().product()];
                for t in terms {
                    let (v, mu) = (self.val(t.value), self.val(t.mean));
                    if v.shape() != shape.as_slice() {
                        return Err(Error::shape(
                            name,
                            format!("term value {:?} differs from {shape:?}", v.shape()),
                        ));
                    }
                    let w = *mask.data().get(t.edge).ok_or_else(|| {
                        Error::shape(
                            name,
                            format!("edge {} outside mask {:?}", t.edge, mask.shape()),
                        )
                    })?;
                    let d = mu.numel();
                    if d == 0 || v.numel() % d != 0 || (d != v.numel() && d != v.last_dim()) {
                        return Err(Error::shape(
                            name,
                            format!("mean {:?} cannot broadcast to {:?}", mu.shape(), v.shape()),
                        ));
                    }
                    for (idx, (o, x)) in out.iter_mut().zip(v.data()).enumerate() {
                        *o += w * x + (1.0 - w) * mu.data()[idx % d];
                    }
                }
                Tensor::new(shape, out)?
            }
            Op::MaskedLinear {
                x,
                mean,
                weight,
                mask,
            } => {
                let (x, mu, w, m) = (
                    self.val(*x),
                    self.val(*mean),
                    self.val(*weight),
                    self.val(*mask),
                );
                let (n, fan_in) = (x.rows(), x.last_dim());
                if w.rank() != 2 || w.shape()[1] != fan_in || m.shape() != w.shape() {
                    return Err(Error::shape(
                        name,
                        format!(
                            "x {:?}, weight {:?}, mask {:?}",
                            x.shape(),
                            w.shape(),
                            m.shape()
                        ),
                    ));
                }
                if mu.numel() != fan_in {
                    return Err(Error::shape(
                        name,
                        format!("mean {:?} for fan-in {fan_in}", mu.shape()),
                    ));
                }
                let fan_out = w.shape()[0];
                let w_eff: Vec<f64> = w.data().iter().zip(m.data()).map(|(a, b)| a * b).collect();
                let mut centered = x.data().to_vec();
                for row in centered.chunks_mut(fan_in) {
                    for (c, mv) in row.iter_mut().zip(mu.data()) {
                        *c -= mv;
                    }
                }
                // Bias from the ablation values: W mu.
                let mut w_mu = vec![0.0; fan_out];
                for (j, wm) in w_mu.iter_mut().enumerate() {
                    *wm = w.row(j).iter().zip(mu.data()).map(|(a, b)| a * b).sum();
                }
                let mut out = vec![0.0; n * fan_out];
                gemm(n, fan_in, fan_out, &centered, false, &w_eff, true, &mut out, false);
                for row in out.chunks_mut(fan_out) {
                    for (o, b) in row.iter_mut().zip(&w_mu) {
                        *o += b;
                    }
                }
                Tensor::new(vec![n, fan_out], out)?
            }
        };
        Ok((out, Saved::Nothing))
    }

    /// Gradients of the scalar `loss` with respect to every trainable slot.
    ///
    /// Slots with no path to the loss receive zeros. Subgraphs that do not
    /// depend on a trainable slot are skipped entirely.
    pub fn backpropagate(&self, loss: Var) -> Result<HashMap<Var, Tensor>> {
        let loss_val = self.value(loss).map_err(|_| {
            Error::usage("backpropagate called before evaluate".to_string())
        })?;
        if loss_val.numel() != 1 {
            return Err(Error::usage(format!(
                "loss must be a scalar, got shape {:?}",
                loss_val.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = self.trainable[i] || self.ops[i].inputs().iter().any(|v| needs[v.0]);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), 1.0));
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.ops[i] {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in self.backward_op(i, &g, &needs)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let mut out = HashMap::new();
        for slot in self.trainable_slots() {
            let g = if slot.0 < n {
                grads[slot.0].take()
            } else {
                None
            };
            let g = match g {
                Some(g) => g,
                None => Tensor::zeros(self.value(slot)?.shape()),
            };
            if !g.all_finite() {
                return Err(Error::NumericOverflow {
                    op: "backward",
                    node: slot.0,
                });
            }
            out.insert(slot, g);
        }
        Ok(out)
    }

    fn backward_op(&self, i: usize, g: &Tensor, needs: &[bool]) -> Result<Vec<(Var, Tensor)>> {
        let want = |v: &Var| needs[v.0];
        let mut out = Vec::new();
        match &self.ops[i] {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.shape()[1];
                if want(a) {
                    let mut da = vec![0.0; m * k];
                    // dA = G B^T, where B is stored as [k,n] or [n,k].
                    gemm(m, n, k, g.data(), false, bv.data(), !*trans_b, &mut da, false);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if want(b) {
                    if *trans_b {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, av.data(), false, &mut db, false);
                        out.push((*b, Tensor::new(vec![n, k], db)?));
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                        out.push((*b, Tensor::new(vec![k, n], db)?));
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(self.ops[i], Op::Add { .. }) {
                    1.0
                } else {
                    -1.0
                };
                if want(a) {
                    out.push((*a, g.clone()));
                }
                if want(b) {
                    let bv = self.val(*b);
                    if bv.shape() == g.shape() {
                        out.push((*b, g.map(|x| sign * x)));
                    } else {
                        out.push((*b, column_sums(g, sign)));
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if want(a) {
                    out.push((*a, zip_map(g, bv, |x, y| x * y)));
                }
                if want(b) {
                    out.push((*b, zip_map(g, av, |x, y| x * y)));
                }
            }
            Op::Affine { a, scale, .. } => {
                if want(a) {
                    out.push((*a, g.map(|x| x * scale)));
                }
            }
            Op::Relu { a } => {
                if want(a) {
                    let av = self.val(*a);
                    out.push((*a, zip_map(g, av, |x, y| if y > 0.0 { x } else { 0.0 })));
                }
            }
            Op::Gelu { a } => {
                if want(a) {
                    let av = self.val(*a);
                    out.push((*a, zip_map(g, av, |x, y| x * gelu_grad(y))));
                }
            }
            Op::Softmax { a } => {
                if want(a) {
                    let p = self.val(Var(i));
                    let d = p.last_dim();
                    let mut da = vec![0.0; p.numel()];
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..d {
                            da[r * d + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    out.push((*a, Tensor::new(p.shape().to_vec(), da)?));
                }
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let Saved::Norm { xhat, rstd } = &self.saved[i] else {
                    return Err(Error::usage("layer norm state missing; evaluate first"));
                };
                let gv = self.val(*gamma);
                let d = gv.numel();
                let rows = g.rows();
                if want(x) {
                    let mut dx = vec![0.0; g.numel()];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
                if want(gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g.row(r)[c] * xhat[r * d + c];
                        }
                    }
                    out.push((*gamma, Tensor::new(gv.shape().to_vec(), dg)?));
                }
                if want(beta) {
                    let bs = self.val(*beta).shape().to_vec();
                    out.push((*beta, column_sums(g, 1.0).reshape(bs)?));
                }
            }
            Op::Embedding { table, ids } => {
                if want(table) {
                    let tv = self.val(*table);
                    let d = tv.shape()[1];
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in self.val(*ids).data().iter().enumerate() {
                        let row = id as usize;
                        for c in 0..d {
                            dt.data_mut()[row * d + c] += g.row(r)[c];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::CausalAttention { q, k, v, seq_len } => {
                let Saved::Probs(probs) = &self.saved[i] else {
                    return Err(Error::usage("attention state missing; evaluate first"));
                };
                let (dq, dk, dv) = attention_backward(
                    self.val(*q),
                    self.val(*k),
                    self.val(*v),
                    probs,
                    g,
                    *seq_len,
                )?;
                if want(q) {
                    out.push((*q, dq));
                }
                if want(k) {
                    out.push((*k, dk));
                }
                if want(v) {
                    out.push((*v, dv));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                if want(logits) {
                    let Saved::Probs(probs) = &self.saved[i] else {
                        return Err(Error::usage("cross-entropy state missing; evaluate first"));
                    };
                    let lv = self.val(*logits);
                    let (t, w) = (self.val(*targets), self.val(*weights));
                    let c = lv.last_dim();
                    let total_w: f64 = w.data().iter().sum();
                    let upstream = g.item()?;
                    let mut dl = probs.clone();
                    for r in 0..lv.rows() {
                        let scale = upstream * w.data()[r] / total_w;
                        let row = &mut dl[r * c..(r + 1) * c];
                        row[t.data()[r] as usize] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= scale);
                    }
                    out.push((*logits, Tensor::new(lv.shape().to_vec(), dl)?));
                }
            }
            Op::Sqrt { a } => {
                if want(a) {
                    // The derivative at 0 is taken as 0 (boundary of the domain).
                    let root = self.val(Var(i));
                    out.push((
                        *a,
                        zip_map(g, root, |x, r| if r > 0.0 { x * 0.5 / r } else { 0.0 }),
                    ));
                }
            }
            Op::Clamp { a, lo, hi } => {
                if want(a) {
                    let av = self.val(*a);
                    out.push((
                        *a,
                        zip_map(g, av, |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }),
                    ));
                }
            }
            Op::Sum { a } => {
                if want(a) {
                    let av = self.val(*a);
                    out.push((*a, Tensor::full(av.shape(), g.item()?)));
                }
            }
            Op::Segment { a, start, .. } => {
                if want(a) {
                    let mut da = Tensor::zeros(self.val(*a).shape());
                    da.data_mut()[*start..start + g.numel()].copy_from_slice(g.data());
                    out.push((*a, da));
                }
            }
            Op::EdgeMix { mask, terms } => {
                let mut dmask = want(mask).then(|| Tensor::zeros(self.val(*mask).shape()));
                let mv = self.val(*mask);
                for t in terms {
                    let w = mv.data()[t.edge];
                    let (v, mu) = (self.val(t.value), self.val(t.mean));
                    let d = mu.numel();
                    if let Some(dm) = dmask.as_mut() {
                        let s: f64 = g
                            .data()
                            .iter()
                            .zip(v.data())
                            .enumerate()
                            .map(|(idx, (gg, x))| gg * (x - mu.data()[idx % d]))
                            .sum();
                        dm.data_mut()[t.edge] += s;
                    }
                    if want(&t.value) {
                        out.push((t.value, g.map(|x| x * w)));
                    }
                    if want(&t.mean) {
                        let mut dmu = vec![0.0; d];
                        for (idx, gg) in g.data().iter().enumerate() {
                            dmu[idx % d] += (1.0 - w) * gg;
                        }
                        out.push((t.mean, Tensor::new(mu.shape().to_vec(), dmu)?));
                    }
                }
                if let Some(dm) = dmask {
                    out.push((*mask, dm));
                }
            }
            Op::MaskedLinear {
                x,
                mean,
                weight,
                mask,
            } => {
                let (xv, mu, wv, mv) = (
                    self.val(*x),
                    self.val(*mean),
                    self.val(*weight),
                    self.val(*mask),
                );
                let (n, fan_in) = (xv.rows(), xv.last_dim());
                let fan_out = wv.shape()[0];
                if want(x) {
                    let w_eff: Vec<f64> =
                        wv.data().iter().zip(mv.data()).map(|(a, b)| a * b).collect();
                    let mut dx = vec![0.0; n * fan_in];
                    gemm(n, fan_out, fan_in, g.data(), false, &w_eff, false, &mut dx, false);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                let col_g = column_sums(g, 1.0);
                if want(weight) || want(mask) {
                    let mut centered = xv.data().to_vec();
                    for row in centered.chunks_mut(fan_in) {
                        for (c, m) in row.iter_mut().zip(mu.data()) {
                            *c -= m;
                        }
                    }
                    // gx[j, i] = sum_n G[n, j] * (x[n, i] - mu[i])
                    let mut gx = vec![0.0; fan_out * fan_in];
                    gemm(fan_out, n, fan_in, g.data(), true, &centered, false, &mut gx, false);
                    if want(mask) {
                        let dm = gx.iter().zip(wv.data()).map(|(a, b)| a * b).collect();
                        out.push((*mask, Tensor::new(mv.shape().to_vec(), dm)?));
                    }
                    if want(weight) {
                        let mut dw: Vec<f64> =
                            gx.iter().zip(mv.data()).map(|(a, b)| a * b).collect();
                        for j in 0..fan_out {
                            for i2 in 0..fan_in {
                                dw[j * fan_in + i2] += col_g.data()[j] * mu.data()[i2];
                            }
                        }
                        out.push((*weight, Tensor::new(wv.shape().to_vec(), dw)?));
                    }
                }
                if want(mean) {
                    let mut dmu = vec![0.0; fan_in];
                    for j in 0..fan_out {
                        let cg = col_g.data()[j];
                        for i2 in 0..fan_in {
                            let idx = j * fan_in + i2;
                            dmu[i2] += cg * wv.data()[idx] * (1.0 - mv.data()[idx]);
                        }
                    }
                    out.push((*mean, Tensor::new(mu.shape().to_vec(), dmu)?));
                }
            }
        }
        Ok(out)
    }
}

/// Central-difference check of `d loss / d slot` against [`Tape::backpropagate`].
///
/// Returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over the checked
/// elements (all of them when `indices` is `None`). `slot` must be trainable.
pub fn finite_difference_check(
    tape: &mut Tape,
    bindings: &Bindings<'_>,
    slot: Var,
    loss: Var,
    step: f64,
    indices: Option<&[usize]>,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    if !tape.is_trainable(slot) {
        return Err(Error::usage(format!("{slot:?} is not trainable")));
    }
    let base = bindings
        .get(slot)
        .ok_or_else(|| Error::usage(format!("{slot:?} is not bound")))?
        .clone();
    tape.evaluate(bindings)?;
    let analytic = tape
        .backpropagate(loss)?
        .remove(&slot)
        .expect("trainable slot has a gradient");
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..base.numel()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &idx in indices {
        let mut probe = |delta: f64| -> Result<f64> {
            let mut shifted = base.clone();
            shifted.data_mut()[idx] += delta;
            let mut b = bindings.clone();
            b.bind(slot, &shifted);
            tape.evaluate(&b)?;
            tape.value(loss)?.item()
        };
        let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
        let a = analytic.data()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    tape.evaluate(bindings)?;
    Ok(worst)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn index_of(op: &'static str, id: f64, bound: usize) -> Result<usize> {
    if id < 0.0 || id.fract() != 0.0 || id as usize >= bound {
        return Err(Error::shape(
            op,
            format!("index {id} is not an integer in [0, {bound})"),
        ));
    }
    Ok(id as usize)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same element count")
}

fn column_sums(g: &Tensor, sign: f64) -> Tensor {
    let d = g.last_dim();
    let mut out = vec![0.0; d];
    for row in g.data().chunks(d.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += sign * v;
        }
    }
    Tensor::vector(out)
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, t: usize) -> Result<(Tensor, Vec<f64>)> {
    let op = "causal_attention";
    if q.shape() != k.shape() || q.rank() != 2 || v.rank() != 2 || v.rows() != q.rows() {
        return Err(Error::shape(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if t == 0 || q.rows() % t != 0 {
        return Err(Error::shape(
            op,
            format!("{} rows are not a multiple of sequence length {t}", q.rows()),
        ));
    }
    let (dh, dv) = (q.last_dim(), v.last_dim());
    let batches = q.rows() / t;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batches * t * t];
    let mut out = vec![0.0; q.rows() * dv];
    for b in 0..batches {
        let base = b * t;
        for i in 0..t {
            let p = &mut probs[(b * t + i) * t..(b * t + i + 1) * t];
            let qi = q.row(base + i);
            for j in 0..=i {
                p[j] = inv * qi.iter().zip(k.row(base + j)).map(|(x, y)| x * y).sum::<f64>();
            }
            softmax_in_place(&mut p[..=i]);
            let o = &mut out[(base + i) * dv..(base + i + 1) * dv];
            for j in 0..=i {
                for (oc, vc) in o.iter_mut().zip(v.row(base + j)) {
                    *oc += p[j] * vc;
                }
            }
        }
    }
    Ok((Tensor::new(vec![q.rows(), dv], out)?, probs))
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    g: &Tensor,
    t: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (dh, dv) = (q.last_dim(), v.last_dim());
    let batches = q.rows() / t;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut dvv = vec![0.0; v.numel()];
    let mut dp = vec![0.0; t];
    for b in 0..batches {
        let base = b * t;
        for i in 0..t {
            let p = &probs[(b * t + i) * t..(b * t + i + 1) * t];
            let gi = g.row(base + i);
            for j in 0..=i {
                dp[j] = gi.iter().zip(v.row(base + j)).map(|(x, y)| x * y).sum();
                let row = &mut dvv[(base + j) * dv..(base + j + 1) * dv];
                for (d, gc) in row.iter_mut().zip(gi) {
                    *d += p[j] * gc;
                }
            }
            let dot: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * inv;
                if ds == 0.0 {
                    continue;
                }
                let (qi, kj) = (q.row(base + i), k.row(base + j));
                for c in 0..dh {
                    dq[(base + i) * dh + c] += ds * kj[c];
                    dk[(base + j) * dh + c] += ds * qi[c];
                }
            }
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dvv)?,
    ))
}
