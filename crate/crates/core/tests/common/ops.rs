// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient checks of every tape primitive against central differences.
//!
//! Each case reduces the op output to a scalar through a fixed random
//! projection, so every output element contributes to the checked gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use circuit_cutter::tape::{Bindings, MixTerm, Tape, Var};
use circuit_cutter::tensor::Tensor;

const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from `kink` so one-sided kinks are never straddled.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64) -> Tensor {
    let mut t = random(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        *v = kink + v.signum() * (0.05 + v.abs());
    }
    t
}

fn loss_at(tape: &Tape, values: &[(Var, Tensor)], loss: Var) -> f64 {
    let mut t = tape.clone();
    let mut b = Bindings::new();
    for (s, v) in values {
        b.bind(*s, v);
    }
    t.evaluate(&b).unwrap();
    t.value(loss).unwrap().item().unwrap()
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every element of
/// every trainable slot in `slots`.
fn worst_error(tape: &mut Tape, values: &[(Var, Tensor)], slots: &[Var], loss: Var) -> f64 {
    let mut b = Bindings::new();
    for (s, v) in values {
        b.bind(*s, v);
    }
    tape.evaluate(&b).unwrap();
    let grads = tape.backpropagate(loss).unwrap();
    let mut worst: f64 = 0.0;
    for &slot in slots {
        let pos = values.iter().position(|(s, _)| *s == slot).unwrap();
        let analytic = &grads[&slot];
        for i in 0..values[pos].1.numel() {
            let probe = |delta: f64| {
                let mut shifted = values.to_vec();
                shifted[pos].1.data_mut()[i] += delta;
                loss_at(tape, &shifted, loss)
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Appends `sum(out * r)` for a fresh random `r` and returns the loss var.
fn project(tape: &mut Tape, out: Var, shape: &[usize], rng: &mut ChaCha8Rng, values: &mut Vec<(Var, Tensor)>) -> Var {
    let r = tape.leaf("r");
    values.push((r, random(rng, shape, -1.0, 1.0)));
    let prod = tape.mul(out, r);
    tape.sum(prod)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

pub type Case = fn(&mut ChaCha8Rng) -> f64;

fn binary(rng: &mut ChaCha8Rng, build: fn(&mut Tape, Var, Var) -> Var, same: bool, kink: Option<f64>) -> f64 {
    let (m, n, _) = dims(rng);
    let mut tape = Tape::new();
    let a = tape.param("a");
    let b = tape.param("b");
    let out = build(&mut tape, a, b);
    let b_shape = if same { vec![m, n] } else { vec![n] };
    let gen = |rng: &mut ChaCha8Rng, s: &[usize]| match kink {
        Some(k) => away_from(rng, s, k),
        None => random(rng, s, -1.0, 1.0),
    };
    let mut values = vec![(a, gen(rng, &[m, n])), (b, gen(rng, &b_shape))];
    let loss = project(&mut tape, out, &[m, n], rng, &mut values);
    worst_error(&mut tape, &values, &[a, b], loss)
}

fn unary(rng: &mut ChaCha8Rng, build: fn(&mut Tape, Var) -> Var, input: fn(&mut ChaCha8Rng, &[usize]) -> Tensor) -> f64 {
    let (m, n, _) = dims(rng);
    let mut tape = Tape::new();
    let a = tape.param("a");
    let out = build(&mut tape, a);
    let mut values = vec![(a, input(rng, &[m, n]))];
    let loss = project(&mut tape, out, &[m, n], rng, &mut values);
    worst_error(&mut tape, &values, &[a], loss)
}

fn plain(rng: &mut ChaCha8Rng, s: &[usize]) -> Tensor {
    random(rng, s, -2.0, 2.0)
}

pub fn matmul(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = dims(rng);
    let trans = rng.gen_bool(0.5);
    let mut tape = Tape::new();
    let a = tape.param("a");
    let b = tape.param("b");
    let out = if trans { tape.matmul_t(a, b) } else { tape.matmul(a, b) };
    let b_shape = if trans { [n, k] } else { [k, n] };
    let mut values = vec![(a, random(rng, &[m, k], -1.0, 1.0)), (b, random(rng, &b_shape, -1.0, 1.0))];
    let loss = project(&mut tape, out, &[m, n], rng, &mut values);
    worst_error(&mut tape, &values, &[a, b], loss)
}

fn add(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, |t, a, b| t.add(a, b), rng.clone().gen_bool(0.5), None)
}

fn sub(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, |t, a, b| t.sub(a, b), rng.clone().gen_bool(0.5), None)
}

fn mul(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, |t, a, b| t.mul(a, b), true, None)
}

fn affine(rng: &mut ChaCha8Rng) -> f64 {
    unary(rng, |t, a| t.affine(a, -1.7, 0.3), plain)
}

fn scale(rng: &mut ChaCha8Rng) -> f64 {
    unary(rng, |t, a| t.scale(a, 2.5), plain)
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    unary(rng, |t, a| t.relu(a), |r, s| away_from(r, s, 0.0))
}

fn gelu(rng: &mut ChaCha8Rng) -> f64 {
    unary(rng, |t, a| t.gelu(a), plain)
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    unary(rng, |t, a| t.softmax(a), plain)
}

fn sqrt(rng: &mut ChaCha8Rng) -> f64 {
    unary(rng, |t, a| t.sqrt(a), |r, s| random(r, s, 0.1, 2.0))
}

fn clamp(rng: &mut ChaCha8Rng) -> f64 {
    unary(
        rng,
        |t, a| t.clamp(a, -0.5, 0.5),
        |r, s| {
            let mut x = random(r, s, -1.0, 1.0);
            // Keep clear of both bounds.
            for v in x.data_mut() {
                if (v.abs() - 0.5).abs() < 0.05 {
                    *v *= 0.5;
                }
            }
            x
        },
    )
}

fn sum(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let mut tape = Tape::new();
    let a = tape.param("a");
    let s = tape.sum(a);
    let loss = tape.affine(s, 0.7, 0.0);
    let values = vec![(a, plain(rng, &[m, n]))];
    worst_error(&mut tape, &values, &[a], loss)
}

fn segment(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let total = m * n + rng.gen_range(0..4);
    let start = total - m * n;
    let mut tape = Tape::new();
    let a = tape.param("a");
    let out = tape.segment(a, start, vec![m, n]);
    let mut values = vec![(a, plain(rng, &[total]))];
    let loss = project(&mut tape, out, &[m, n], rng, &mut values);
    worst_error(&mut tape, &values, &[a], loss)
}

fn layer_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (m, _, _) = dims(rng);
    let d = rng.gen_range(2..6);
    let mut tape = Tape::new();
    let x = tape.param("x");
    let g = tape.param("gamma");
    let b = tape.param("beta");
    let out = tape.layer_norm(x, g, b, 1e-5);
    let mut values = vec![
        (x, plain(rng, &[m, d])),
        (g, random(rng, &[d], 0.5, 1.5)),
        (b, plain(rng, &[d])),
    ];
    let loss = project(&mut tape, out, &[m, d], rng, &mut values);
    worst_error(&mut tape, &values, &[x, g, b], loss)
}

fn embedding(rng: &mut ChaCha8Rng) -> f64 {
    let (v, d, n) = dims(rng);
    let mut tape = Tape::new();
    let table = tape.param("table");
    let ids = tape.leaf("ids");
    let out = tape.embedding(table, ids);
    let id_values = Tensor::vector((0..n).map(|_| rng.gen_range(0..v) as f64).collect());
    let mut values = vec![(table, plain(rng, &[v, d])), (ids, id_values)];
    let loss = project(&mut tape, out, &[n, d], rng, &mut values);
    worst_error(&mut tape, &values, &[table], loss)
}

fn causal_attention(rng: &mut ChaCha8Rng) -> f64 {
    let blocks = rng.gen_range(1..3);
    let seq = rng.gen_range(1..4);
    let d = rng.gen_range(1..4);
    let rows = blocks * seq;
    let mut tape = Tape::new();
    let q = tape.param("q");
    let k = tape.param("k");
    let v = tape.param("v");
    let out = tape.causal_attention(q, k, v, seq);
    let mut values = vec![(q, plain(rng, &[rows, d])), (k, plain(rng, &[rows, d])), (v, plain(rng, &[rows, d]))];
    let loss = project(&mut tape, out, &[rows, d], rng, &mut values);
    worst_error(&mut tape, &values, &[q, k, v], loss)
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(1..5);
    let c = rng.gen_range(2..6);
    let mut tape = Tape::new();
    let logits = tape.param("logits");
    let targets = tape.leaf("targets");
    let weights = tape.leaf("weights");
    let loss = tape.cross_entropy(logits, targets, weights);
    let values = vec![
        (logits, plain(rng, &[n, c])),
        (targets, Tensor::vector((0..n).map(|_| rng.gen_range(0..c) as f64).collect())),
        (weights, random(rng, &[n], 0.1, 2.0)),
    ];
    worst_error(&mut tape, &values, &[logits], loss)
}

fn edge_mix(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, terms) = dims(rng);
    let edges = terms + rng.gen_range(0..3);
    let mut tape = Tape::new();
    let mask = tape.param("mask");
    let mut values = vec![(mask, random(rng, &[edges], 0.0, 1.0))];
    let mut mix = Vec::new();
    let mut slots = vec![mask];
    for t in 0..terms {
        let value = tape.param(format!("v{t}"));
        let mean = tape.param(format!("mu{t}"));
        values.push((value, plain(rng, &[m, n])));
        values.push((mean, plain(rng, &[n])));
        slots.extend([value, mean]);
        mix.push(MixTerm {
            value,
            mean,
            edge: rng.gen_range(0..edges),
        });
    }
    let out = tape.edge_mix(mask, mix);
    let loss = project(&mut tape, out, &[m, n], rng, &mut values);
    worst_error(&mut tape, &values, &slots, loss)
}

fn masked_linear(rng: &mut ChaCha8Rng) -> f64 {
    let (n, fan_in, fan_out) = dims(rng);
    let mut tape = Tape::new();
    let x = tape.param("x");
    let mean = tape.param("mean");
    let w = tape.param("w");
    let mask = tape.param("mask");
    let out = tape.masked_linear(x, mean, w, mask);
    let mut values = vec![
        (x, plain(rng, &[n, fan_in])),
        (mean, plain(rng, &[fan_in])),
        (w, plain(rng, &[fan_out, fan_in])),
        (mask, random(rng, &[fan_out, fan_in], 0.0, 1.0)),
    ];
    let loss = project(&mut tape, out, &[n, fan_out], rng, &mut values);
    worst_error(&mut tape, &values, &[x, mean, w, mask], loss)
}

pub const CASES: [(&str, Case); 20] = [
    ("matmul", matmul),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("affine", affine),
    ("scale", scale),
    ("relu", relu),
    ("gelu", gelu),
    ("softmax", softmax),
    ("sqrt", sqrt),
    ("clamp", clamp),
    ("sum", sum),
    ("segment", segment),
    ("layer_norm", layer_norm),
    ("embedding", embedding),
    ("causal_attention", causal_attention),
    ("cross_entropy", cross_entropy),
    ("edge_mix", edge_mix),
    ("masked_linear", masked_linear),
    ("composite", composite),
];

/// A small chain mixing several ops, so interactions are covered too.
fn composite(rng: &mut ChaCha8Rng) -> f64 {
    let (m, n, _) = dims(rng);
    let mut tape = Tape::new();
    let a = tape.param("a");
    let w = tape.param("w");
    let h = tape.matmul_t(a, w);
    let g = tape.gelu(h);
    let s = tape.softmax(g);
    let mut values = vec![(a, plain(rng, &[m, n])), (w, plain(rng, &[n, n]))];
    let loss = project(&mut tape, s, &[m, n], rng, &mut values);
    worst_error(&mut tape, &values, &[a, w], loss)
}

