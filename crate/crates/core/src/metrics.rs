// SPDX-License-Identifier: MIT OR Apache-2.0

//! Losses and accuracies computed from logits.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::program::{predict, Ablation};
use crate::tape::log_sum_exp;
use crate::tensor::Tensor;

/// Environment variable capping the number of evaluation workers.
pub const THREADS_ENV: &str = "CIRCUIT_CUTTER_THREADS";

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn worker_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(cores)
}

fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_count())
            .build()
            .expect("thread pool")
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of every row of `logits` against its target.
pub fn row_losses(logits: &Tensor, targets: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            log_sum_exp(row) - row[targets.data()[i] as usize]
        })
        .collect()
}

/// Weighted sums accumulated over a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub loss_sum: f64,
    pub correct_sum: f64,
    pub weight: f64,
}

impl Totals {
    pub fn from_logits(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Self {
        let losses = row_losses(logits, targets);
        let mut t = Totals::default();
        for (i, &l) in losses.iter().enumerate() {
            let w = weights.data()[i];
            if w == 0.0 {
                continue;
            }
            t.loss_sum += w * l;
            if argmax(logits.row(i)) == targets.data()[i] as usize {
                t.correct_sum += w;
            }
            t.weight += w;
        }
        t
    }

    pub fn merge(self, other: Totals) -> Totals {
        Totals {
            loss_sum: self.loss_sum + other.loss_sum,
            correct_sum: self.correct_sum + other.correct_sum,
            weight: self.weight + other.weight,
        }
    }

    pub fn loss(&self) -> f64 {
        self.loss_sum / self.weight
    }

    pub fn accuracy(&self) -> f64 {
        self.correct_sum / self.weight
    }
}

/// Evaluation batch size used when scanning whole datasets.
pub const EVAL_CHUNK: usize = 256;

/// Weighted loss and accuracy of a model over a dataset.
///
/// Chunks are evaluated in parallel and reduced in index order, so the result
/// does not depend on the worker count.
pub fn dataset_totals<N: Network>(
    model: &N,
    data: &Dataset,
    ablation: Option<Ablation<'_>>,
) -> Result<Totals> {
    if data.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Result<Totals>> = pool().install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(data.len())).collect();
                let batch = data.batch(&idx);
                let logits = predict(model, &batch, ablation)?;
                Ok(Totals::from_logits(&logits, &batch.targets, &batch.weights))
            })
            .collect()
    });
    let mut total = Totals::default();
    for p in parts {
        total = total.merge(p?);
    }
    if total.weight <= 0.0 {
        return Err(Error::usage("dataset has no weighted targets"));
    }
    Ok(total)
}

/// Per-example weighted mean loss, in dataset order.
pub fn example_losses<N: Network>(
    model: &N,
    data: &Dataset,
    ablation: Option<Ablation<'_>>,
) -> Result<Vec<f64>> {
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Result<Vec<f64>>> = pool().install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(data.len())).collect();
                let batch = data.batch(&idx);
                let logits = predict(model, &batch, ablation)?;
                let rows = row_losses(&logits, &batch.targets);
                let per = batch.targets_per_example();
                Ok(rows
                    .chunks(per)
                    .zip(batch.weights.data().chunks(per))
                    .map(|(l, w)| {
                        let mass: f64 = w.iter().sum();
                        if mass == 0.0 {
                            0.0
                        } else {
                            l.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / mass
                        }
                    })
                    .collect())
            })
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
