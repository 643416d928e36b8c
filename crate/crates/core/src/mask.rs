// SPDX-License-Identifier: MIT OR Apache-2.0

//! Continuous edge masks: the training objective, the optimization loop and
//! rounding to a discrete ablation set.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablation::{AblationKind, AblationStore};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Edge, Granularity};
use crate::models::Network;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::program::{Program, Trainable};
use crate::tape::{Bindings, Tape, Var};
use crate::tensor::Tensor;

/// One weight in `[0, 1]` per graph edge, in canonical edge order.
/// `1` keeps an edge, `0` fully ablates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMask {
    graph_hash: String,
    weights: Vec<f64>,
}

impl EdgeMask {
    pub fn new(graph: &ComputeGraph, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != graph.num_edges() {
            return Err(Error::usage(format!(
                "mask has {} weights for {} edges",
                weights.len(),
                graph.num_edges()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::usage(format!("mask weight {w} outside [0, 1]")));
        }
        Ok(Self {
            graph_hash: graph.structural_hash().to_string(),
            weights,
        })
    }

    pub fn ones(graph: &ComputeGraph) -> Self {
        Self {
            graph_hash: graph.structural_hash().to_string(),
            weights: vec![1.0; graph.num_edges()],
        }
    }

    pub fn graph_hash(&self) -> &str {
        &self.graph_hash
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.weights.clone())
    }

    /// Number of edges with `w_e <= tau`.
    pub fn count_at_most(&self, tau: f64) -> usize {
        self.weights.iter().filter(|&&w| w <= tau).count()
    }
}

/// Weight of the regularizer as a function of the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// `max(0, (t - offset) / divisor)`.
    Linear { offset: f64, divisor: f64 },
    /// `t`.
    Identity,
    Constant { value: f64 },
}

pub fn lambda_schedule(schedule: &LambdaSchedule, step: u64) -> f64 {
    let t = step as f64;
    match *schedule {
        LambdaSchedule::Linear { offset, divisor } => ((t - offset) / divisor).max(0.0),
        LambdaSchedule::Identity => t,
        LambdaSchedule::Constant { value } => value,
    }
}

/// Penalty on the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `sum w_e`: penalizes kept edges.
    SumW,
    /// `sum (1 - w_e)`: penalizes ablated edges.
    SumOneMinusW,
    /// `sum sqrt(1 - w_e)`: penalizes ablated edges, steeply near `w_e = 1`.
    SumSqrtOneMinusW,
}

pub fn regularizer(mask: &EdgeMask, kind: Regularizer) -> f64 {
    let w = mask.weights();
    match kind {
        Regularizer::SumW => w.iter().sum(),
        Regularizer::SumOneMinusW => w.iter().map(|x| 1.0 - x).sum(),
        Regularizer::SumSqrtOneMinusW => w.iter().map(|x| (1.0 - x).max(0.0).sqrt()).sum(),
    }
}

fn record_regularizer(tape: &mut Tape, mask: Var, kind: Regularizer) -> Var {
    match kind {
        Regularizer::SumW => tape.sum(mask),
        Regularizer::SumOneMinusW => {
            let r = tape.affine(mask, -1.0, 1.0);
            tape.sum(r)
        }
        Regularizer::SumSqrtOneMinusW => {
            let r = tape.affine(mask, -1.0, 1.0);
            let r = tape.clamp(r, 0.0, 1.0);
            let r = tape.sqrt(r);
            tape.sum(r)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskTrainConfig {
    /// Weight of the behavior loss.
    pub alpha: f64,
    pub lambda_schedule: LambdaSchedule,
    pub regularizer: Regularizer,
    /// Rounding threshold.
    pub tau: f64,
    pub steps: usize,
    pub train_batch: usize,
    pub behavior_batch: usize,
    pub optimizer: OptimizerConfig,
    /// Behavior loss is clipped at this value inside the objective; `None`
    /// disables clipping.
    #[serde(default = "default_ceiling")]
    pub behavior_ceiling: Option<f64>,
    pub seed: u64,
}

fn default_ceiling() -> Option<f64> {
    Some(20.0)
}

impl MaskTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::usage(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::usage(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.train_batch == 0 || self.behavior_batch == 0 {
            return Err(Error::usage("batch sizes must be positive"));
        }
        if let LambdaSchedule::Linear { divisor, .. } = self.lambda_schedule {
            if divisor == 0.0 {
                return Err(Error::usage("lambda divisor must be nonzero"));
            }
        }
        Ok(())
    }
}

/// The mask objective recorded on a two-stream program (stream 0 reads
/// training data, stream 1 behavior data).
struct Objective {
    program: Program,
    lambda: Var,
    reg: Var,
    total: Var,
}

impl Objective {
    fn new<N: Network>(model: &N, config: &MaskTrainConfig, trainable: Trainable) -> Result<Self> {
        let mut program = Program::rewired(model, 2, trainable)?;
        let (train_loss, behavior_loss) = (program.stream(0).loss, program.stream(1).loss);
        let mask = program.mask().expect("rewired program");
        let ceiling = config.behavior_ceiling.unwrap_or(f64::INFINITY);
        let tape = program.tape_mut();
        let lambda = tape.leaf("lambda");
        let clipped = tape.clamp(behavior_loss, f64::NEG_INFINITY, ceiling);
        let weighted = tape.scale(clipped, -config.alpha);
        let task = tape.add(train_loss, weighted);
        let reg = record_regularizer(tape, mask, config.regularizer);
        let penalty = tape.mul(lambda, reg);
        let total = tape.add(task, penalty);
        Ok(Self {
            program,
            lambda,
            reg,
            total,
        })
    }
}

/// Values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub train_loss: f64,
    pub behavior_loss: f64,
    pub lambda: f64,
    pub reg: f64,
}

/// Evaluates `L_train - alpha * L_behavior + lambda(step) * R(mask)` on one
/// training batch and one behavior batch.
#[allow(clippy::too_many_arguments)]
pub fn mask_objective<N: Network>(
    mask: &EdgeMask,
    model: &N,
    graph: &ComputeGraph,
    store: &AblationStore,
    train: &crate::data::Batch,
    behavior: &crate::data::Batch,
    config: &MaskTrainConfig,
    step: u64,
) -> Result<ObjectiveValue> {
    check_inputs(mask, graph, store)?;
    let mut obj = Objective::new(model, config, Trainable::Nothing)?;
    let means = store.group_tensors(model)?;
    let weights = mask.to_tensor();
    let lambda = Tensor::scalar(lambda_schedule(&config.lambda_schedule, step));
    let params = model.parameters();
    let mut b = Bindings::new();
    let p = &obj.program;
    p.bind_parameters(&mut b, &params)?;
    p.bind_ablation(&mut b, &weights, &means)?;
    p.bind_batch(&mut b, 0, train)?;
    p.bind_batch(&mut b, 1, behavior)?;
    b.bind(obj.lambda, &lambda);
    obj.program.forward(&b)?;
    read_value(&obj, lambda.item()?)
}

fn read_value(obj: &Objective, lambda: f64) -> Result<ObjectiveValue> {
    let p = &obj.program;
    Ok(ObjectiveValue {
        total: p.value(obj.total)?.item()?,
        train_loss: p.value(p.stream(0).loss)?.item()?,
        behavior_loss: p.value(p.stream(1).loss)?.item()?,
        lambda,
        reg: p.value(obj.reg)?.item()?,
    })
}

fn check_inputs(mask: &EdgeMask, graph: &ComputeGraph, store: &AblationStore) -> Result<()> {
    let hash = graph.structural_hash();
    if mask.graph_hash() != hash || store.graph_hash() != hash {
        return Err(Error::usage("mask, ablation store and graph do not match"));
    }
    Ok(())
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub train_loss: f64,
    pub behavior_loss: f64,
    pub lambda: f64,
    pub reg_value: f64,
    /// Edges with `w_e <= tau` after the step.
    pub soft_ablated_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("history.csv", e))?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            records,
            warnings: Vec::new(),
        })
    }
}

/// Learns a mask for `model` starting from all ones. Model weights and the
/// ablation values stay fixed; only the mask moves.
pub fn train_mask<N: Network>(
    model: &N,
    graph: &ComputeGraph,
    store: &AblationStore,
    train: &Dataset,
    behavior: &Dataset,
    config: &MaskTrainConfig,
) -> Result<(EdgeMask, TrainHistory)> {
    config.validate()?;
    let mut mask = EdgeMask::ones(graph);
    check_inputs(&mask, graph, store)?;
    let mut history = TrainHistory::default();
    if config.steps == 0 {
        return Ok((mask, history));
    }
    let mut obj = Objective::new(model, config, Trainable::Mask)?;
    let means = store.group_tensors(model)?;
    let params = model.parameters();
    let mask_slot = obj.program.mask().expect("rewired program");
    let mut optimizer =
        Optimizer::new(config.optimizer, &[graph.num_edges()]).with_bounds(0, 0.0, 1.0);
    let mut train_sampler = BatchSampler::new(train.len(), config.train_batch, config.seed)?;
    let mut behavior_sampler =
        BatchSampler::new(behavior.len(), config.behavior_batch, config.seed.wrapping_add(1))?;
    let mut weights = mask.to_tensor();
    let mut first_behavior = None;
    let mut best_behavior = f64::NEG_INFINITY;
    for step in 0..config.steps as u64 {
        let train_batch = train.batch(&train_sampler.next_indices());
        let behavior_batch = behavior.batch(&behavior_sampler.next_indices());
        let lambda_value = lambda_schedule(&config.lambda_schedule, step);
        let lambda = Tensor::scalar(lambda_value);
        let (value, grad) = {
            let mut b = Bindings::new();
            let p = &obj.program;
            p.bind_parameters(&mut b, &params)?;
            p.bind_ablation(&mut b, &weights, &means)?;
            p.bind_batch(&mut b, 0, &train_batch)?;
            p.bind_batch(&mut b, 1, &behavior_batch)?;
            b.bind(obj.lambda, &lambda);
            obj.program.forward(&b).map_err(|e| step_error(step, e))?;
            let value = read_value(&obj, lambda_value)?;
            let mut grads = obj.program.backward(obj.total)?;
            let grad = grads.remove(&mask_slot).expect("mask is trainable");
            (value, grad)
        };
        optimizer
            .step(&mut [&mut weights], &[&grad])
            .map_err(|e| step_error(step, e))?;
        first_behavior.get_or_insert(value.behavior_loss);
        best_behavior = best_behavior.max(value.behavior_loss);
        history.records.push(HistoryRecord {
            step,
            train_loss: value.train_loss,
            behavior_loss: value.behavior_loss,
            lambda: value.lambda,
            reg_value: value.reg,
            soft_ablated_count: weights.data().iter().filter(|&&w| w <= config.tau).count(),
        });
        if step % 100 == 0 {
            log::debug!(
                "mask step {step}: train {:.4} behavior {:.4} lambda {:.4} reg {:.3}",
                value.train_loss,
                value.behavior_loss,
                value.lambda,
                value.reg
            );
        }
    }
    if first_behavior.is_some_and(|first| best_behavior <= first) {
        history.warnings.push(format!(
            "behavior loss never exceeded its initial value {:.4}",
            first_behavior.unwrap_or_default()
        ));
    }
    mask.weights = weights.into_data();
    Ok((mask, history))
}

fn step_error(step: u64, err: Error) -> Error {
    match err {
        Error::NumericOverflow { op, node } => {
            Error::Training(format!("non-finite value in {op} (node {node}) at mask step {step}"))
        }
        Error::Training(msg) => Error::Training(format!("{msg} (mask step {step})")),
        other => other,
    }
}

/// Indices of edges with `w_e <= tau`.
pub fn round_mask(mask: &EdgeMask, tau: f64) -> Result<BTreeSet<usize>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::usage(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(mask
        .weights()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w <= tau)
        .map(|(i, _)| i)
        .collect())
}

/// The mask artifact written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskArtifact {
    pub graph_hash: String,
    pub granularity: Granularity,
    pub ablation_kind: AblationKind,
    pub tau: f64,
    pub weights: Vec<f64>,
    pub ablated_indices: Vec<usize>,
    pub config: MaskTrainConfig,
    pub seed: u64,
}

impl MaskArtifact {
    pub fn new(
        graph: &ComputeGraph,
        mask: &EdgeMask,
        kind: AblationKind,
        config: &MaskTrainConfig,
    ) -> Result<Self> {
        Ok(Self {
            graph_hash: mask.graph_hash().to_string(),
            granularity: graph.granularity().clone(),
            ablation_kind: kind,
            tau: config.tau,
            weights: mask.weights().to_vec(),
            ablated_indices: round_mask(mask, config.tau)?.into_iter().collect(),
            config: config.clone(),
            seed: config.seed,
        })
    }

    pub fn mask(&self, graph: &ComputeGraph) -> Result<EdgeMask> {
        if self.graph_hash != graph.structural_hash() {
            return Err(Error::usage(format!(
                "mask artifact belongs to graph {}, not {}",
                self.graph_hash,
                graph.structural_hash()
            )));
        }
        EdgeMask::new(graph, self.weights.clone())
    }

    pub fn ablated_edges(&self, graph: &ComputeGraph) -> Vec<Edge> {
        self.ablated_indices
            .iter()
            .filter_map(|&i| graph.edges().get(i).copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_mlp_graph;

    #[test]
    fn linear_schedule_matches_formula() {
        let s = LambdaSchedule::Linear {
            offset: 20.0,
            divisor: 10000.0,
        };
        assert_eq!(lambda_schedule(&s, 20), 0.0);
        assert_eq!(lambda_schedule(&s, 10020), 1.0);
        assert_eq!(lambda_schedule(&s, 0), 0.0);
        assert_eq!(lambda_schedule(&LambdaSchedule::Identity, 7), 7.0);
        assert_eq!(lambda_schedule(&LambdaSchedule::Constant { value: 0.5 }, 7), 0.5);
    }

    #[test]
    fn regularizer_values() {
        let g = build_mlp_graph(&[2, 3, 1]).unwrap();
        assert_eq!(g.num_edges(), 9);
        let ones = EdgeMask::ones(&g);
        assert_eq!(regularizer(&ones, Regularizer::SumSqrtOneMinusW), 0.0);
        assert_eq!(regularizer(&ones, Regularizer::SumW), 9.0);
        let mut w = vec![1.0; 9];
        w[4] = 0.0;
        let one_off = EdgeMask::new(&g, w).unwrap();
        assert_eq!(regularizer(&one_off, Regularizer::SumSqrtOneMinusW), 1.0);
        assert_eq!(regularizer(&one_off, Regularizer::SumOneMinusW), 1.0);
    }

    #[test]
    fn rounding_is_inclusive() {
        let g = build_mlp_graph(&[3, 1]).unwrap();
        let m = EdgeMask::new(&g, vec![0.2, 0.5, 0.7]).unwrap();
        assert_eq!(round_mask(&m, 0.5).unwrap(), BTreeSet::from([0, 1]));
        assert!(round_mask(&EdgeMask::ones(&g), 0.99).unwrap().is_empty());
        assert!(round_mask(&m, 1.0).is_err());
    }

    #[test]
    fn masks_reject_out_of_range_weights() {
        let g = build_mlp_graph(&[3, 1]).unwrap();
        assert!(EdgeMask::new(&g, vec![0.2, 1.5, 0.7]).is_err());
        assert!(EdgeMask::new(&g, vec![0.2]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = MaskTrainConfig {
            alpha: 0.3,
            lambda_schedule: LambdaSchedule::Identity,
            regularizer: Regularizer::SumSqrtOneMinusW,
            tau: 0.5,
            steps: 1,
            train_batch: 4,
            behavior_batch: 4,
            optimizer: OptimizerConfig::mask_default(),
            behavior_ceiling: Some(20.0),
            seed: 0,
        };
        assert!(c.validate().is_ok());
        c.tau = 1.0;
        assert!(c.validate().is_err());
        c.tau = 0.5;
        c.alpha = 0.0;
        assert!(c.validate().is_err());
    }
}
