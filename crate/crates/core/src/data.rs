// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled examples and the batches fed to models.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input layout shared by every example of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    /// Fixed-size feature vectors with one class target each.
    Features { width: usize },
    /// Token sequences of a fixed length with one next-token target per position.
    Sequence { len: usize },
}

/// One labeled example.
///
/// `weights` selects which targets count toward the loss; a zero weight
/// position is still computed but ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub targets: Vec<u32>,
    pub weights: Vec<f64>,
    /// Free-form label, e.g. the original digit before label merging.
    pub tag: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DataKind,
    pub examples: Vec<Example>,
}

/// Stacked examples ready to bind to a model tape.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[n, width]` features or `[n * len]` token ids.
    pub inputs: Tensor,
    pub targets: Tensor,
    pub weights: Tensor,
    /// Sequence length for token batches.
    pub seq_len: Option<usize>,
    /// Position ids `0..len` repeated per example, for token batches.
    pub positions: Option<Tensor>,
    /// Number of examples.
    pub size: usize,
}

impl Dataset {
    pub fn new(kind: DataKind, examples: Vec<Example>) -> Result<Self> {
        let (width, targets) = match kind {
            DataKind::Features { width } => (width, 1),
            DataKind::Sequence { len } => (len, len),
        };
        for (i, ex) in examples.iter().enumerate() {
            if ex.input.len() != width || ex.targets.len() != targets || ex.weights.len() != targets
            {
                return Err(Error::usage(format!(
                    "example {i} does not match layout {kind:?}"
                )));
            }
        }
        Ok(Self { kind, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// A dataset holding the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            kind: self.kind,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// Concatenation of two datasets with the same layout.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.kind != other.kind {
            return Err(Error::usage("cannot concatenate datasets of different layouts"));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Ok(Self {
            kind: self.kind,
            examples,
        })
    }

    /// Stacks the examples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = indices.len();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for &i in indices {
            let ex = &self.examples[i];
            inputs.extend_from_slice(&ex.input);
            targets.extend(ex.targets.iter().map(|&t| t as f64));
            weights.extend_from_slice(&ex.weights);
        }
        let (inputs, seq_len, positions) = match self.kind {
            DataKind::Features { width } => (
                Tensor::new(vec![n, width], inputs).expect("validated layout"),
                None,
                None,
            ),
            DataKind::Sequence { len } => (
                Tensor::vector(inputs),
                Some(len),
                Some(Tensor::vector(
                    (0..n * len).map(|i| (i % len) as f64).collect(),
                )),
            ),
        };
        Batch {
            inputs,
            targets: Tensor::vector(targets),
            weights: Tensor::vector(weights),
            seq_len,
            positions,
            size: n,
        }
    }

    /// Consecutive batches of at most `size` examples covering the dataset in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |start| {
                let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
                self.batch(&idx)
            })
    }

    pub fn all(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

impl Batch {
    /// Loss weights summed per example.
    pub fn weight_mass(&self) -> f64 {
        self.weights.sum()
    }

    /// Number of targets per example.
    pub fn targets_per_example(&self) -> usize {
        self.seq_len.unwrap_or(1)
    }
}

/// Endless shuffled minibatches: each pass over the data is a fresh
/// permutation, and a batch never spans two passes.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::usage("cannot sample batches from an empty dataset"));
        }
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            batch: batch.clamp(1, len),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}
