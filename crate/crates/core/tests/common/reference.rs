// SPDX-License-Identifier: MIT OR Apache-2.0

//! Straight-line reference forward passes and small synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use circuit_cutter::ablation::compute_node_means;
use circuit_cutter::data::{Batch, DataKind, Dataset, Example};
use circuit_cutter::models::{MlpModel, Network, TransformerConfig};
use circuit_cutter::program::{Program, Trainable};
use circuit_cutter::tape::Bindings;
use circuit_cutter::tensor::Tensor;

pub const DIMS: [usize; 3] = [6, 5, 4];

pub fn features(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| Example {
            input: (0..DIMS[0]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            targets: vec![rng.gen_range(0..DIMS[2] as u32)],
            weights: vec![1.0],
            tag: 0,
        })
        .collect();
    Dataset::new(DataKind::Features { width: DIMS[0] }, examples).unwrap()
}

pub fn tokens(n: usize, config: &TransformerConfig, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = config.context;
    let examples = (0..n)
        .map(|_| {
            let ids: Vec<u32> = (0..=len).map(|_| rng.gen_range(0..config.vocab as u32)).collect();
            Example {
                input: ids[..len].iter().map(|&t| t as f64).collect(),
                targets: ids[1..].to_vec(),
                weights: vec![1.0; len],
                tag: 0,
            }
        })
        .collect();
    Dataset::new(DataKind::Sequence { len }, examples).unwrap()
}

/// Straight-line MLP forward where each edge `(j, i)` carries
/// `m * x_i + (1 - m) * mu_i`; `mask = None` is the unablated network.
pub fn reference_mlp(model: &MlpModel, x: &[f64], mask: Option<&[f64]>, means: &[Tensor]) -> Vec<f64> {
    let params = model.parameters();
    let layers = params.len() / 2;
    let mut h = x.to_vec();
    let mut offset = 0;
    for l in 0..layers {
        let (w, b) = (params[2 * l], params[2 * l + 1]);
        let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
        let mut z = b.data().to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            for i in 0..fan_in {
                let edge = match mask {
                    Some(m) => {
                        let mi = m[offset + j * fan_in + i];
                        mi * h[i] + (1.0 - mi) * means[l].data()[i]
                    }
                    None => h[i],
                };
                *zj += w.data()[j * fan_in + i] * edge;
            }
        }
        offset += fan_out * fan_in;
        h = if l + 1 < layers { z.into_iter().map(|v| v.max(0.0)).collect() } else { z };
    }
    h
}

pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

pub fn mlp_setup(seed: u64) -> (MlpModel, Dataset) {
    (MlpModel::init(&DIMS, seed).unwrap(), features(120, seed ^ 0x55))
}

pub fn tiny_transformer() -> TransformerConfig {
    TransformerConfig {
        vocab: 7,
        d_model: 8,
        layers: 2,
        heads: 2,
        d_mlp: 12,
        context: 4,
    }
}

/// Mean cross-entropy of reference logits, independent of the tape.
pub fn reference_loss(model: &MlpModel, data: &Dataset, mask: &[f64], means: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for ex in &data.examples {
        let logits = reference_mlp(model, &ex.input, Some(mask), means);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - logits[ex.targets[0] as usize];
    }
    total / data.len() as f64
}

/// Worst `|analytic - numeric| / max(1, |numeric|)` of the mask gradient of
/// the training loss over `edges` random edges of a small MLP. The numeric
/// side uses [`reference_loss`], so it never touches the tape.
pub fn mask_gradient_error(seed: u64, edges: usize) -> f64 {
    let (model, data) = mlp_setup(seed);
    let graph = model.graph().unwrap();
    let store = compute_node_means(&graph, &model, &data).unwrap();
    let means = store.group_tensors(&model).unwrap();
    let small = data.subset(&(0..16).collect::<Vec<_>>());
    let batch: Batch = small.all();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let weights: Vec<f64> = (0..graph.num_edges()).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mask = Tensor::vector(weights.clone());

    let mut program = Program::rewired(&model, 1, Trainable::Mask).unwrap();
    let params = model.parameters();
    let mut b = Bindings::new();
    program.bind_parameters(&mut b, &params).unwrap();
    program.bind_ablation(&mut b, &mask, &means).unwrap();
    program.bind_batch(&mut b, 0, &batch).unwrap();
    program.forward(&b).unwrap();
    let loss = program.stream(0).loss;
    let grads = program.backward(loss).unwrap();
    let analytic = &grads[&program.mask().unwrap()];

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..edges {
        let e = rng.gen_range(0..graph.num_edges());
        let probe = |d: f64| {
            let mut w = weights.clone();
            w[e] += d;
            reference_loss(&model, &small, &w, &means)
        };
        let numeric = (probe(h) - probe(-h)) / (2.0 * h);
        worst = worst.max((analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}
