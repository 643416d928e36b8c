// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch training of base models.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MlpModel, Network, ToyTransformer, TransformerConfig};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::dataset_totals;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::program::{Program, Trainable};
use crate::tape::{Bindings, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Anneals the learning rate to zero along a half cosine.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Random translation of image inputs during training.
    #[serde(default)]
    pub augment: Option<ShiftAugment>,
    /// Decoupled weight decay applied after every step.
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

/// Shifts each training image by up to `max_shift` pixels along both axes,
/// filling vacated pixels with zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftAugment {
    pub height: usize,
    pub width: usize,
    pub max_shift: usize,
}

impl ShiftAugment {
    fn apply(&self, batch: &mut Batch, rng: &mut ChaCha8Rng) {
        let (h, w) = (self.height as isize, self.width as isize);
        let m = self.max_shift as isize;
        let size = self.height * self.width;
        let data = batch.inputs.data_mut();
        let mut shifted = vec![0.0; size];
        for img in data.chunks_mut(size) {
            let dy = rng.gen_range(-m..=m);
            let dx = rng.gen_range(-m..=m);
            shifted.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..h {
                let sy = y - dy;
                if !(0..h).contains(&sy) {
                    continue;
                }
                for x in 0..w {
                    let sx = x - dx;
                    if (0..w).contains(&sx) {
                        shifted[(y * w + x) as usize] = img[(sy * w + sx) as usize];
                    }
                }
            }
            img.copy_from_slice(&shifted);
        }
    }
}

impl FitConfig {
    pub fn mnist_default(seed: u64) -> Self {
        Self {
            epochs: 30,
            max_steps: None,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(2e-3),
            cosine_decay: true,
            weight_decay: 0.0,
            augment: Some(ShiftAugment {
                height: 28,
                width: 28,
                max_shift: 1,
            }),
            seed,
        }
    }
}

/// Takes one optimizer step on `loss` for the parameters of `model`, with
/// `batches[i]` bound to stream `i` and `extras` bound to further leaves.
/// Returns the loss before the step.
pub(crate) fn parameter_step<N: Network>(
    model: &mut N,
    program: &mut Program,
    optimizer: &mut Optimizer,
    batches: &[&Batch],
    extras: &[(Var, &Tensor)],
    loss: Var,
) -> Result<f64> {
    let (value, grads) = {
        let params = model.parameters();
        let mut b = Bindings::new();
        program.bind_parameters(&mut b, &params)?;
        for (i, batch) in batches.iter().enumerate() {
            program.bind_batch(&mut b, i, batch)?;
        }
        for &(slot, t) in extras {
            b.bind(slot, t);
        }
        program.forward(&b)?;
        let value = program.value(loss)?.item()?;
        let grads = program.backward(loss)?;
        (value, grads)
    };
    let grads: Vec<_> = program
        .params()
        .iter()
        .map(|p| grads.get(p).cloned().ok_or_else(|| Error::Training("missing gradient".into())))
        .collect::<Result<_>>()?;
    let refs: Vec<_> = grads.iter().collect();
    let mut params = model.parameters_mut();
    optimizer.step(&mut params, &refs)?;
    Ok(value)
}

/// Minimizes weighted cross-entropy on `data` with shuffled minibatches.
/// Returns the loss of every step.
pub fn fit<N: Network>(model: &mut N, data: &Dataset, config: &FitConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::usage("cannot train on an empty dataset"));
    }
    let mut program = Program::plain(model, 1, Trainable::Parameters)?;
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.numel()).collect();
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    let loss = program.stream(0).loss;
    let per_epoch = data.len().div_ceil(config.batch_size.max(1));
    let total = config
        .max_steps
        .unwrap_or(usize::MAX)
        .min(per_epoch * config.epochs)
        .max(1);
    'outer: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            if config.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'outer;
            }
            let mut lr_scale = 1.0;
            if config.cosine_decay {
                let progress = losses.len() as f64 / total as f64;
                lr_scale = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                optimizer.set_lr_scale(lr_scale);
            }
            let mut batch = data.batch(chunk);
            if let Some(aug) = &config.augment {
                aug.apply(&mut batch, &mut rng);
            }
            let value = parameter_step(
                model,
                &mut program,
                &mut optimizer,
                &[&batch],
                &[],
                loss,
            )?;
            if config.weight_decay > 0.0 {
                let shrink = 1.0 - lr_scale * config.optimizer.lr() * config.weight_decay;
                for p in model.parameters_mut() {
                    p.data_mut().iter_mut().for_each(|x| *x *= shrink);
                }
            }
            losses.push(value);
        }
    }
    Ok(losses)
}

/// Accuracy below which base training is reported as a failure.
pub const MIN_BASE_ACCURACY: f64 = 0.95;

/// Trains the reference classifier and checks held-out accuracy.
pub fn train_base_mlp(
    layer_dims: &[usize],
    train: &Dataset,
    heldout: &Dataset,
    config: &FitConfig,
) -> Result<(MlpModel, f64)> {
    let mut model = MlpModel::init(layer_dims, config.seed)?;
    let losses = fit(&mut model, train, config)?;
    let accuracy = dataset_totals(&model, heldout, None)?.accuracy();
    log::info!(
        "base model: {} steps, final loss {:.4}, held-out accuracy {:.4}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        accuracy
    );
    if accuracy < MIN_BASE_ACCURACY {
        return Err(Error::Training(format!(
            "held-out accuracy {accuracy:.4} is below {MIN_BASE_ACCURACY}"
        )));
    }
    Ok((model, accuracy))
}

/// Default behavior threshold for a language model over `vocab` tokens.
pub fn lm_threshold(vocab: usize) -> f64 {
    0.6 * (vocab as f64).ln()
}

/// Trains the toy transformer on natural corpus text and checks that it
/// learned the planted behavior (behavior loss below `threshold`).
pub fn train_base_lm(
    model_config: TransformerConfig,
    train: &Dataset,
    behavior: &Dataset,
    threshold: f64,
    config: &FitConfig,
) -> Result<ToyTransformer> {
    let mut model = ToyTransformer::init(model_config, config.seed)?;
    let losses = fit(&mut model, train, config)?;
    let behavior_loss = dataset_totals(&model, behavior, None)?.loss();
    log::info!(
        "base LM: {} steps, final loss {:.4}, behavior loss {:.4}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        behavior_loss
    );
    if behavior_loss >= threshold {
        return Err(Error::Training(format!(
            "behavior loss {behavior_loss:.4} did not fall below {threshold:.4}"
        )));
    }
    Ok(model)
}
