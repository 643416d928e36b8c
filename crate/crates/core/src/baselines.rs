// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight-editing baselines: joint fine-tuning, gradient ascent and task
//! arithmetic. All of them keep the architecture and change only weights.

use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::mask::{HistoryRecord, TrainHistory};
use crate::metrics::dataset_totals;
use crate::models::train::{fit, parameter_step, FitConfig};
use crate::models::{Network, WeightVector};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::program::{Program, Trainable};

/// Validation-based early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            eval_every: 50,
            patience: 5,
        }
    }
}

/// Outcome of feeding one validation value to an [`EarlyStopper`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation value seen so far.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(u64, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records the validation value at `step`. Lower is better; ties do not
    /// count as improvement.
    pub fn observe(&mut self, step: u64, value: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if !(value < best) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((step, value));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    /// Step and value of the best observation.
    pub fn best(&self) -> Option<(u64, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFinetuneConfig {
    pub alpha: f64,
    /// Upper bound on optimizer steps.
    pub max_steps: usize,
    pub train_batch: usize,
    pub behavior_batch: usize,
    pub optimizer: OptimizerConfig,
    /// Behavior losses above this value stop contributing.
    #[serde(default = "default_ceiling")]
    pub behavior_ceiling: Option<f64>,
    #[serde(default)]
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
}

fn default_ceiling() -> Option<f64> {
    Some(20.0)
}

/// Held-out slices that score the joint objective for early stopping.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub train: &'a Dataset,
    pub behavior: &'a Dataset,
}

/// Result of a weight-editing run.
#[derive(Debug, Clone)]
pub struct Edited<N> {
    pub model: N,
    pub history: TrainHistory,
    /// Step after which the returned weights were taken.
    pub selected_step: u64,
    /// The run stopped on a non-finite loss or gradient.
    pub diverged: bool,
}

fn record(step: u64, train_loss: f64, behavior_loss: f64) -> HistoryRecord {
    HistoryRecord {
        step,
        train_loss,
        behavior_loss,
        lambda: 0.0,
        reg_value: 0.0,
        soft_ablated_count: 0,
    }
}

fn clipped(loss: f64, ceiling: Option<f64>) -> f64 {
    loss.min(ceiling.unwrap_or(f64::INFINITY))
}

/// Joint objective on the validation slices.
fn validation_objective<N: Network>(model: &N, v: &Validation<'_>, cfg: &JointFinetuneConfig) -> Result<f64> {
    let train = dataset_totals(model, v.train, None)?.loss();
    let behavior = dataset_totals(model, v.behavior, None)?.loss();
    Ok(train - cfg.alpha * clipped(behavior, cfg.behavior_ceiling))
}

/// Fine-tunes every weight on `L_train - alpha * L_behavior` and returns the
/// weights with the best validation objective.
pub fn joint_finetune<N: Network>(
    model: &N,
    train: &Dataset,
    behavior: &Dataset,
    validation: Validation<'_>,
    cfg: &JointFinetuneConfig,
) -> Result<Edited<N>> {
    if cfg.early_stop.eval_every == 0 {
        return Err(Error::usage("early stopping needs eval_every >= 1"));
    }
    let mut current = model.clone();
    let mut best = WeightVector::of(model);
    let mut stopper = EarlyStopper::new(cfg.early_stop.patience.max(1));
    stopper.observe(0, validation_objective(model, &validation, cfg)?);
    let mut history = TrainHistory::default();
    if cfg.max_steps == 0 {
        return Ok(Edited {
            model: current,
            history,
            selected_step: 0,
            diverged: false,
        });
    }

    let mut program = Program::plain(model, 2, Trainable::Parameters)?;
    let (train_loss, behavior_loss) = (program.stream(0).loss, program.stream(1).loss);
    let ceiling = cfg.behavior_ceiling.unwrap_or(f64::INFINITY);
    let tape = program.tape_mut();
    let capped = tape.clamp(behavior_loss, f64::NEG_INFINITY, ceiling);
    let weighted = tape.scale(capped, -cfg.alpha);
    let total = tape.add(train_loss, weighted);

    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.numel()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, &sizes);
    let mut train_sampler = BatchSampler::new(train.len(), cfg.train_batch, cfg.seed)?;
    let mut behavior_sampler =
        BatchSampler::new(behavior.len(), cfg.behavior_batch, cfg.seed.wrapping_add(1))?;
    let mut diverged = false;
    for step in 1..=cfg.max_steps as u64 {
        let tb = train.batch(&train_sampler.next_indices());
        let bb = behavior.batch(&behavior_sampler.next_indices());
        match parameter_step(&mut current, &mut program, &mut optimizer, &[&tb, &bb], &[], total) {
            Ok(_) => {}
            Err(Error::NumericOverflow { .. } | Error::Training(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        let t = program.value(train_loss)?.item()?;
        let b = program.value(behavior_loss)?.item()?;
        history.records.push(record(step, t, b));
        if step % cfg.early_stop.eval_every as u64 == 0 {
            let value = validation_objective(&current, &validation, cfg)?;
            if !value.is_finite() {
                diverged = true;
                break;
            }
            match stopper.observe(step, value) {
                StopDecision::Improved => best = WeightVector::of(&current),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
    }
    if diverged {
        history.warnings.push("joint fine-tuning stopped on a non-finite value".into());
    }
    let selected_step = stopper.best().map_or(0, |(s, _)| s);
    let mut edited = model.clone();
    best.apply(&mut edited)?;
    Ok(Edited {
        model: edited,
        history,
        selected_step,
        diverged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientAscentConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// Maximizes loss on `behavior` alone. A non-finite loss or gradient stops
/// the run and returns the last finite weights with `diverged` set.
pub fn gradient_ascent<N: Network>(
    model: &N,
    behavior: &Dataset,
    cfg: &GradientAscentConfig,
) -> Result<Edited<N>> {
    let mut current = model.clone();
    let mut history = TrainHistory::default();
    let mut diverged = false;
    let mut last_step = 0;
    if cfg.steps > 0 {
        let mut program = Program::plain(model, 1, Trainable::Parameters)?;
        let loss = program.stream(0).loss;
        let negated = program.tape_mut().scale(loss, -1.0);
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.numel()).collect();
        let mut optimizer = Optimizer::new(cfg.optimizer, &sizes);
        let mut sampler = BatchSampler::new(behavior.len(), cfg.batch, cfg.seed)?;
        for step in 1..=cfg.steps as u64 {
            let batch = behavior.batch(&sampler.next_indices());
            let before = WeightVector::of(&current);
            let value = match parameter_step(&mut current, &mut program, &mut optimizer, &[&batch], &[], negated) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NumericOverflow { .. } | Error::Training(_)) => {
                    before.apply(&mut current)?;
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if WeightVector::of(&current).0.iter().any(|x| !x.is_finite()) {
                before.apply(&mut current)?;
                diverged = true;
                break;
            }
            history.records.push(record(step, f64::NAN, -value));
            last_step = step;
        }
    }
    if diverged {
        history
            .warnings
            .push(format!("gradient ascent diverged after step {last_step}"));
    }
    Ok(Edited {
        model: current,
        history,
        selected_step: last_step,
        diverged,
    })
}

/// Subtracts the task vector of a fine-tune toward the behavior:
/// `theta* = theta - (theta_ft - theta)`.
pub fn task_arithmetic<N: Network>(model: &N, behavior: &Dataset, cfg: &FitConfig) -> Result<Edited<N>> {
    let mut tuned = model.clone();
    let losses = fit(&mut tuned, behavior, cfg)?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Training("task fine-tune produced a non-finite loss".into()));
    }
    let theta = WeightVector::of(model);
    let theta_ft = WeightVector::of(&tuned);
    let mut edited = model.clone();
    negate_task_vector(&theta, &theta_ft).apply(&mut edited)?;
    let history = TrainHistory {
        records: losses
            .iter()
            .enumerate()
            .map(|(i, &l)| record(i as u64 + 1, f64::NAN, l))
            .collect(),
        warnings: Vec::new(),
    };
    Ok(Edited {
        model: edited,
        history,
        selected_step: losses.len() as u64,
        diverged: false,
    })
}

/// `theta - (theta_ft - theta)` elementwise.
pub fn negate_task_vector(theta: &WeightVector, theta_ft: &WeightVector) -> WeightVector {
    WeightVector(
        theta
            .0
            .iter()
            .zip(&theta_ft.0)
            .map(|(t, f)| t - (f - t))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataKind, Example};
    use crate::models::MlpModel;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|i| {
                let class = (i % 3) as u32;
                let mut input: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.3..0.3)).collect();
                input[class as usize] += 1.0;
                Example {
                    input,
                    targets: vec![class],
                    weights: vec![1.0],
                    tag: class,
                }
            })
            .collect();
        Dataset::new(DataKind::Features { width: 4 }, examples).unwrap()
    }

    fn tag_subset(ds: &Dataset, tag: u32) -> Dataset {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.examples[i].tag == tag).collect();
        ds.subset(&idx)
    }

    fn trained() -> MlpModel {
        let mut m = MlpModel::init(&[4, 8, 3], 3).unwrap();
        let cfg = FitConfig {
            epochs: 40,
            max_steps: None,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-2),
            cosine_decay: false,
            augment: None,
            weight_decay: 0.0,
            seed: 1,
        };
        fit(&mut m, &blobs(300, 1), &cfg).unwrap();
        m
    }

    #[test]
    fn stopper_returns_best_not_last() {
        let mut s = EarlyStopper::new(2);
        let curve = [5.0, 3.0, 1.0, 2.0, 0.5, 0.7, 0.9];
        let mut decisions = Vec::new();
        for (i, &v) in curve.iter().enumerate() {
            decisions.push(s.observe(i as u64, v));
            if decisions.last() == Some(&StopDecision::Stop) {
                break;
            }
        }
        assert_eq!(s.best(), Some((4, 0.5)));
        assert_eq!(decisions.last(), Some(&StopDecision::Stop));
        assert_eq!(decisions.len(), 7);
    }

    #[test]
    fn negated_task_vector_is_reflection() {
        let t = WeightVector(vec![1.0, -2.0]);
        let f = WeightVector(vec![1.2, -2.0]);
        let out = negate_task_vector(&t, &f);
        assert!((out.0[0] - 0.8).abs() < 1e-12);
        assert_eq!(out.0[1], -2.0);
    }

    #[test]
    fn zero_step_editors_are_identity() {
        let m = trained();
        let data = blobs(60, 2);
        let beh = tag_subset(&data, 0);
        let ga = gradient_ascent(
            &m,
            &beh,
            &GradientAscentConfig {
                steps: 0,
                batch: 8,
                optimizer: OptimizerConfig::adam(1e-2),
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(ga.model, m);
        let frozen = FitConfig {
            epochs: 1,
            max_steps: None,
            batch_size: 8,
            optimizer: OptimizerConfig::Sgd { lr: 0.0 },
            cosine_decay: false,
            augment: None,
            weight_decay: 0.0,
            seed: 0,
        };
        assert_eq!(task_arithmetic(&m, &beh, &frozen).unwrap().model, m);
        let cfg = JointFinetuneConfig {
            alpha: 0.2,
            max_steps: 0,
            train_batch: 8,
            behavior_batch: 8,
            optimizer: OptimizerConfig::adam(1e-2),
            behavior_ceiling: Some(20.0),
            early_stop: EarlyStopConfig::default(),
            seed: 0,
        };
        let v = Validation {
            train: &data,
            behavior: &beh,
        };
        assert_eq!(joint_finetune(&m, &data, &beh, v, &cfg).unwrap().model, m);
    }

    #[test]
    fn editors_raise_behavior_loss() {
        let m = trained();
        let train = blobs(300, 4);
        let beh = tag_subset(&blobs(60, 5), 0);
        let before = dataset_totals(&m, &beh, None).unwrap().loss();
        let ga = gradient_ascent(
            &m,
            &beh,
            &GradientAscentConfig {
                steps: 30,
                batch: beh.len(),
                optimizer: OptimizerConfig::adam(1e-2),
                seed: 0,
            },
        )
        .unwrap();
        assert!(dataset_totals(&ga.model, &beh, None).unwrap().loss() > before);
        let early: Vec<f64> = ga.history.records.iter().take(5).map(|r| r.behavior_loss).collect();
        assert!(early.windows(2).all(|w| w[1] >= w[0]), "{early:?}");

        let cfg = JointFinetuneConfig {
            alpha: 0.5,
            max_steps: 400,
            train_batch: 32,
            behavior_batch: 10,
            optimizer: OptimizerConfig::adam(1e-2),
            behavior_ceiling: Some(5.0),
            early_stop: EarlyStopConfig {
                eval_every: 20,
                patience: 5,
            },
            seed: 0,
        };
        let val_train = blobs(90, 6);
        let val_beh = tag_subset(&blobs(60, 7), 0);
        let v = Validation {
            train: &val_train,
            behavior: &val_beh,
        };
        let jf = joint_finetune(&m, &train, &beh, v, &cfg).unwrap();
        assert!(dataset_totals(&jf.model, &beh, None).unwrap().loss() > before);
        assert_eq!(jf.selected_step % 20, 0);
        assert_eq!(jf.model.parameter_count(), m.parameter_count());
    }
}
