// SPDX-License-Identifier: MIT OR Apache-2.0

//! Invariants of rounding, edge mixing and the rewired forward pass, each
//! checked against an independent reference computation.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use circuit_cutter::ablation::{compute_node_means, hard_ablate_forward, indicator_mask, masked_forward};
use circuit_cutter::graph::{build_mlp_graph, build_residual_graph, residual_edge_count};
use circuit_cutter::mask::{round_mask, EdgeMask};
use circuit_cutter::models::{Network, ToyTransformer};
use circuit_cutter::program::predict;

use common::reference::*;

#[test]
fn all_ones_mask_matches_plain_forward() {
    let (model, data) = mlp_setup(3);
    let graph = model.graph().unwrap();
    let store = compute_node_means(&graph, &model, &data).unwrap();
    let batch = data.all();
    assert!(batch.size >= 100);
    let plain = predict(&model, &batch, None).unwrap();
    let masked = masked_forward(&graph, &model, &EdgeMask::ones(&graph), &store, &batch).unwrap();
    assert!(rel_err(&plain, &masked) <= 1e-5);
    let means = store.group_tensors(&model).unwrap();
    for (r, ex) in data.examples.iter().enumerate() {
        let expect = reference_mlp(&model, &ex.input, None, &means);
        for (a, b) in expect.iter().zip(plain.row(r)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    let config = tiny_transformer();
    let lm = ToyTransformer::init(config, 4).unwrap();
    let seqs = tokens(100, &config, 8);
    let graph = lm.graph().unwrap();
    let store = compute_node_means(&graph, &lm, &seqs).unwrap();
    let batch = seqs.all();
    let plain = predict(&lm, &batch, None).unwrap();
    let masked = masked_forward(&graph, &lm, &EdgeMask::ones(&graph), &store, &batch).unwrap();
    assert!(rel_err(&plain, &masked) <= 1e-5);
}

#[test]
fn residual_edge_counts() {
    let graph = build_residual_graph(12, 12).unwrap();
    assert_eq!((graph.num_nodes(), graph.num_edges()), (158, 11_611));
    for layers in 1..=12 {
        for heads in 1..=12 {
            let g = build_residual_graph(layers, heads).unwrap();
            // Every node reads from everything upstream of it except heads
            // of its own layer: count by walking the node list.
            let mut upstream = 0usize;
            let mut brute = 0usize;
            for _layer in 0..layers {
                brute += heads * (1 + upstream);
                brute += 1 + upstream + heads;
                upstream += heads + 1;
            }
            brute += 1 + upstream;
            assert_eq!(g.num_edges(), brute, "L={layers} H={heads}");
            assert_eq!(residual_edge_count(layers, heads), brute);
            assert_eq!(g.num_nodes(), 2 + layers * (heads + 1));
        }
    }
}

fn mask_from(weights: &[f64]) -> (circuit_cutter::graph::ComputeGraph, EdgeMask) {
    let graph = build_mlp_graph(&[weights.len(), 1]).unwrap();
    let mask = EdgeMask::new(&graph, weights.to_vec()).unwrap();
    (graph, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rounding_is_inclusive_and_monotone(
        weights in prop::collection::vec(0.0f64..=1.0, 1..40),
        t1 in 0.01f64..0.99,
        t2 in 0.01f64..0.99,
    ) {
        let (_, mask) = mask_from(&weights);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = round_mask(&mask, lo).unwrap();
        let b = round_mask(&mask, hi).unwrap();
        prop_assert!(a.is_subset(&b));
        for (i, &w) in weights.iter().enumerate() {
            prop_assert_eq!(a.contains(&i), w <= lo);
        }
        // A weight sitting exactly on the threshold is ablated.
        let mut on = weights.clone();
        on[0] = lo;
        let (_, m) = mask_from(&on);
        prop_assert!(round_mask(&m, lo).unwrap().contains(&0));
    }

    #[test]
    fn rounding_is_idempotent_on_binary_masks(
        bits in prop::collection::vec(any::<bool>(), 1..40),
        tau in 0.01f64..0.99,
    ) {
        let weights: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (graph, mask) = mask_from(&weights);
        let once = round_mask(&mask, tau).unwrap();
        let expect: BTreeSet<usize> = bits.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i).collect();
        prop_assert_eq!(&once, &expect);
        let again = indicator_mask(&graph, &once).unwrap();
        prop_assert_eq!(again.weights(), mask.weights());
        prop_assert_eq!(round_mask(&again, tau).unwrap(), once);
    }

    #[test]
    fn edge_mixing_is_affine_between_mean_and_value(seed in any::<u64>(), w in 0.0f64..=1.0) {
        let (model, data) = mlp_setup(seed % 7);
        let graph = model.graph().unwrap();
        let store = compute_node_means(&graph, &model, &data).unwrap();
        let means = store.group_tensors(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = rng.gen_range(0..data.len());
        let batch = data.batch(&[row]);
        let input = &data.examples[row].input;
        // Perturb a single output-layer edge: logits are affine in its weight.
        let first = DIMS[0] * DIMS[1];
        let edge = first + rng.gen_range(0..DIMS[1] * DIMS[2]);
        let mut weights = vec![1.0; graph.num_edges()];
        let at = |w: f64, weights: &mut Vec<f64>| {
            weights[edge] = w;
            let mask = EdgeMask::new(&graph, weights.clone()).unwrap();
            masked_forward(&graph, &model, &mask, &store, &batch).unwrap()
        };
        let full = at(1.0, &mut weights);
        let none = at(0.0, &mut weights);
        let mid = at(w, &mut weights);
        prop_assert!(rel_err(&full, &predict(&model, &batch, None).unwrap()) < 1e-12);
        let params = model.parameters();
        let (out_w, fan_in) = (params[2], DIMS[1]);
        let (j, i) = ((edge - first) / fan_in, (edge - first) % fan_in);
        // Slope of logit j is W[j, i] * (v_i - mu_i) for the hidden value v_i.
        let (w0, b0) = (params[0], params[1]);
        let v_i = (0..DIMS[0]).map(|k| w0.data()[i * DIMS[0] + k] * input[k]).sum::<f64>() + b0.data()[i];
        let v_i = v_i.max(0.0);
        let slope = out_w.data()[j * fan_in + i] * (v_i - means[1].data()[i]);
        prop_assert!((full.data()[j] - none.data()[j] - slope).abs() < 1e-10);
        for c in 0..DIMS[2] {
            let lin = none.data()[c] + w * (full.data()[c] - none.data()[c]);
            prop_assert!((mid.data()[c] - lin).abs() < 1e-10);
        }
        // Fully ablated edge carries exactly the mean.
        let mut ablated = vec![1.0; graph.num_edges()];
        ablated[edge] = 0.0;
        let expect = reference_mlp(&model, input, Some(&ablated), &means);
        for (a, b) in expect.iter().zip(none.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_ablation_equals_indicator_mask(seed in any::<u64>(), count in 0usize..60) {
        let (model, data) = mlp_setup(seed % 5);
        let graph = model.graph().unwrap();
        let store = compute_node_means(&graph, &model, &data).unwrap();
        let means = store.group_tensors(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ablated: BTreeSet<usize> = (0..count).map(|_| rng.gen_range(0..graph.num_edges())).collect();
        let batch = data.batch(&(0..20).collect::<Vec<_>>());
        let hard = hard_ablate_forward(&graph, &model, &ablated, &store, &batch).unwrap();
        let mask = indicator_mask(&graph, &ablated).unwrap();
        let soft = masked_forward(&graph, &model, &mask, &store, &batch).unwrap();
        prop_assert_eq!(hard.data(), soft.data());
        for r in 0..20 {
            let expect = reference_mlp(&model, &data.examples[r].input, Some(mask.weights()), &means);
            for (a, b) in expect.iter().zip(hard.row(r)) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}

#[test]
fn mask_gradients_match_finite_differences() {
    for seed in [21, 22, 23] {
        let err = mask_gradient_error(seed, 10);
        assert!(err <= 1e-4, "seed {seed}: {err:.3e}");
    }
}
