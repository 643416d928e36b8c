// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria, one status line each.
//!
//! Lines go straight to stderr so they show up even when the harness captures
//! test output. The MNIST criterion needs the IDX files; it reports SKIP when
//! they cannot be found.

mod common;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use circuit_cutter::ablation::{compute_node_means, hard_ablate_forward, indicator_mask, masked_forward};
use circuit_cutter::evaluation::{EditReport, EditorKind, BEHAVIOR, CONTROL, PREPENDED_CONTROL};
use circuit_cutter::graph::{build_mlp_graph, build_residual_graph, residual_edge_count};
use circuit_cutter::harness::config::MNIST_ENV;
use circuit_cutter::harness::{AblatedSet, BaseMetrics, BaselineKind, ExperimentConfig, Pipeline, Stage};
use circuit_cutter::io::read_json;
use circuit_cutter::mask::{round_mask, EdgeMask};
use circuit_cutter::models::{Architecture, MlpModel, Network, ToyTransformer};
use circuit_cutter::program::predict;
use circuit_cutter::tape::{Bindings, MixTerm, Tape};
use circuit_cutter::tensor::Tensor;

use common::ops::{CASES, TOL};
use common::reference::{mask_gradient_error, reference_mlp, rel_err, tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Verdict {
    id: u8,
    title: &'static str,
    status: Status,
    detail: String,
}

fn emit(v: &Verdict) {
    let tag = match v.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[{tag}] criterion {}: {} | {}", v.id, v.title, v.detail);
    let _ = err.flush();
}

fn verdict(id: u8, title: &'static str, ok: bool, detail: String) -> Verdict {
    let v = Verdict {
        id,
        title,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    };
    emit(&v);
    v
}

fn mnist_dir() -> Option<PathBuf> {
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    std::env::var_os(MNIST_ENV)
        .map(PathBuf::from)
        .into_iter()
        .chain([workspace, PathBuf::from("/root/data/mnist")])
        .find(|d| d.join("train-images-idx3-ubyte").is_file())
}

fn report(dir: &Path, editor: EditorKind) -> EditReport {
    read_json(&dir.join(format!("report_{}.json", editor.slug()))).unwrap()
}

fn relative_increase(r: &EditReport, split: &str) -> f64 {
    let s = r.split(split).unwrap();
    (s.edited_loss - s.original_loss) / s.original_loss
}

fn stage_seconds(p: &Pipeline, stages: &[Stage]) -> f64 {
    let m = p.manifest().unwrap();
    stages.iter().map(|s| m.timings[&s.to_string()]).sum()
}

const EDIT_STAGES: [Stage; 5] = [Stage::TrainBase, Stage::Means, Stage::TrainMask, Stage::Round, Stage::Evaluate];

fn mnist() -> Verdict {
    let title = "MNIST target digit removed, other digits kept";
    let Some(dir) = mnist_dir() else {
        let v = Verdict {
            id: 1,
            title,
            status: Status::Skip,
            detail: format!("MNIST IDX files not found; set {MNIST_ENV}"),
        };
        emit(&v);
        return v;
    };
    let out = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::mnist(dir);
    let p = Pipeline::new(config, Some(out.path())).unwrap();
    p.run_stages(&EDIT_STAGES).unwrap();
    let base: BaseMetrics = read_json(&p.dir().join("base_metrics.json")).unwrap();
    let r = report(p.dir(), EditorKind::Ablated);
    let target = r.split(BEHAVIOR).unwrap().edited_accuracy.unwrap();
    let other = r.split(CONTROL).unwrap().edited_accuracy.unwrap();
    let fraction = r.edge_fraction.unwrap();
    let minutes = stage_seconds(&p, &EDIT_STAGES) / 60.0;
    let ok = base.heldout_accuracy >= 0.98 && target <= 0.30 && other >= 0.95 && fraction <= 0.025 && minutes <= 15.0;
    verdict(
        1,
        title,
        ok,
        format!(
            "base {:.4} (>= 0.98), target {:.4} (<= 0.30), non-target {:.4} (>= 0.95), edges {} = {:.4}% (<= 2.5%), {minutes:.1} min (<= 15)",
            base.heldout_accuracy,
            target,
            other,
            r.edges_ablated.unwrap(),
            100.0 * fraction
        ),
    )
}

fn graph_counts() -> Verdict {
    let g = build_residual_graph(12, 12).unwrap();
    let mut mismatches = Vec::new();
    for layers in 1..=12 {
        for heads in 1..=12 {
            let enumerated = build_residual_graph(layers, heads).unwrap().num_edges();
            if residual_edge_count(layers, heads) != enumerated {
                mismatches.push((layers, heads));
            }
        }
    }
    let ok = g.num_nodes() == 158 && g.num_edges() == 11_611 && mismatches.is_empty();
    verdict(
        2,
        "residual graph size and closed-form edge count",
        ok,
        format!(
            "(12,12): {} nodes, {} edges; closed form mismatches over [1,12]^2: {}",
            g.num_nodes(),
            g.num_edges(),
            mismatches.len()
        ),
    )
}

fn all_ones() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mlp = MlpModel::init(&[784, 50, 5], 1).unwrap();
    let images = {
        let examples = (0..128)
            .map(|_| circuit_cutter::data::Example {
                input: (0..784).map(|_| rng.gen_range(0.0..1.0)).collect(),
                targets: vec![rng.gen_range(0..5)],
                weights: vec![1.0],
                tag: 0,
            })
            .collect();
        circuit_cutter::data::Dataset::new(circuit_cutter::data::DataKind::Features { width: 784 }, examples).unwrap()
    };
    let graph = mlp.graph().unwrap();
    let store = compute_node_means(&graph, &mlp, &images).unwrap();
    let batch = images.all();
    let mlp_err = rel_err(
        &predict(&mlp, &batch, None).unwrap(),
        &masked_forward(&graph, &mlp, &EdgeMask::ones(&graph), &store, &batch).unwrap(),
    );

    let Architecture::Transformer(config) = ExperimentConfig::toy_lm().model else {
        unreachable!()
    };
    let lm = ToyTransformer::init(config, 2).unwrap();
    let seqs = tokens(100, &config, 31);
    let graph = lm.graph().unwrap();
    let store = compute_node_means(&graph, &lm, &seqs).unwrap();
    let batch = seqs.all();
    let lm_err = rel_err(
        &predict(&lm, &batch, None).unwrap(),
        &masked_forward(&graph, &lm, &EdgeMask::ones(&graph), &store, &batch).unwrap(),
    );
    verdict(
        3,
        "all-ones mask reproduces the plain forward",
        mlp_err <= 1e-5 && lm_err <= 1e-5,
        format!("max relative error: MLP {mlp_err:.2e} on 128 inputs, transformer {lm_err:.2e} on 100 sequences (<= 1e-5)"),
    )
}

fn mixing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst_ends: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..8);
        let mut tape = Tape::new();
        let mask = tape.leaf("mask");
        let v = tape.leaf("v");
        let mu = tape.leaf("mu");
        let mixed = tape.edge_mix(mask, vec![MixTerm { value: v, mean: mu, edge: 0 }]);
        let vt = Tensor::vector((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let mt = Tensor::vector((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let mut at = |w: f64| {
            let wt = Tensor::vector(vec![w]);
            tape.evaluate(&Bindings::new().with(mask, &wt).with(v, &vt).with(mu, &mt)).unwrap();
            tape.value(mixed).unwrap().clone()
        };
        let w = rng.gen_range(0.0..1.0);
        let (one, zero, mid) = (at(1.0), at(0.0), at(w));
        for i in 0..n {
            worst_ends = worst_ends.max((one.data()[i] - vt.data()[i]).abs());
            worst_ends = worst_ends.max((zero.data()[i] - mt.data()[i]).abs());
            let expect = mt.data()[i] + w * (vt.data()[i] - mt.data()[i]);
            worst_affine = worst_affine.max((mid.data()[i] - expect).abs());
        }
    }

    // Hard ablation on a real-size MLP against the indicator mask and a
    // straight-line reference.
    let model = MlpModel::init(&[784, 50, 5], 3).unwrap();
    let data = {
        let examples = (0..40)
            .map(|_| circuit_cutter::data::Example {
                input: (0..784).map(|_| rng.gen_range(0.0..1.0)).collect(),
                targets: vec![0],
                weights: vec![1.0],
                tag: 0,
            })
            .collect();
        circuit_cutter::data::Dataset::new(circuit_cutter::data::DataKind::Features { width: 784 }, examples).unwrap()
    };
    let graph = model.graph().unwrap();
    let store = compute_node_means(&graph, &model, &data).unwrap();
    let means = store.group_tensors(&model).unwrap();
    let ablated: BTreeSet<usize> = (0..400).map(|_| rng.gen_range(0..graph.num_edges())).collect();
    let batch = data.all();
    let hard = hard_ablate_forward(&graph, &model, &ablated, &store, &batch).unwrap();
    let indicator = indicator_mask(&graph, &ablated).unwrap();
    let soft = masked_forward(&graph, &model, &indicator, &store, &batch).unwrap();
    let exact = hard.data() == soft.data();
    let mut worst_ref: f64 = 0.0;
    for (r, ex) in data.examples.iter().enumerate() {
        let expect = reference_mlp(&model, &ex.input, Some(indicator.weights()), &means);
        for (a, b) in expect.iter().zip(hard.row(r)) {
            worst_ref = worst_ref.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    let ok = worst_ends == 0.0 && worst_affine <= 1e-12 && exact && worst_ref <= 1e-10;
    verdict(
        4,
        "edge mixing endpoints, affinity and hard ablation",
        ok,
        format!(
            "endpoint error {worst_ends:.1e}, affine error {worst_affine:.1e}, hard == indicator: {exact}, vs reference {worst_ref:.1e}"
        ),
    )
}

fn gradients() -> Verdict {
    let mask_err = mask_gradient_error(50, 10);
    let mut worst: Vec<(f64, &str)> = Vec::new();
    for (name, case) in CASES {
        let err = (0..100u64)
            .map(|seed| case(&mut ChaCha8Rng::seed_from_u64(seed)))
            .fold(0.0, f64::max);
        worst.push((err, name));
    }
    worst.sort_by(|a, b| b.0.total_cmp(&a.0));
    let ok = mask_err <= 1e-4 && worst[0].0 <= TOL;
    verdict(
        5,
        "mask and primitive gradients match central differences",
        ok,
        format!(
            "mask error {mask_err:.2e} on 10 edges; {} primitive checks x 100 cases, worst {} at {:.2e} (<= 1e-4)",
            CASES.len(),
            worst[0].1,
            worst[0].0
        ),
    )
}

fn rounding() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut failures = String::new();
    for case in 0..500 {
        let n = rng.gen_range(1..60);
        let graph = build_mlp_graph(&[n, 1]).unwrap();
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let t1 = rng.gen_range(0.01..0.99);
        let t2 = rng.gen_range(t1..0.99);
        w[0] = t1;
        let mask = EdgeMask::new(&graph, w.clone()).unwrap();
        let (a, b) = (round_mask(&mask, t1).unwrap(), round_mask(&mask, t2).unwrap());
        if !a.contains(&0) {
            let _ = write!(failures, " case {case}: weight at tau kept;");
        }
        if !a.is_subset(&b) {
            let _ = write!(failures, " case {case}: not monotone;");
        }
        let binary = indicator_mask(&graph, &a).unwrap();
        if round_mask(&binary, t2).unwrap() != a || round_mask(&binary, t1).unwrap() != a {
            let _ = write!(failures, " case {case}: not idempotent;");
        }
    }
    let ok = failures.is_empty();
    verdict(
        6,
        "rounding is inclusive, monotone and idempotent",
        ok,
        if ok { "500 random masks".into() } else { failures },
    )
}

struct LmRuns {
    verdicts: Vec<Verdict>,
}

fn language_model() -> LmRuns {
    let out = tempfile::tempdir().unwrap();
    let p = Pipeline::new(ExperimentConfig::toy_lm(), Some(out.path())).unwrap();
    p.run_stages(&EDIT_STAGES).unwrap();
    let k = p.config().evaluation.k;
    let set: AblatedSet = read_json(&p.dir().join("ablated.json")).unwrap();
    let ablated = report(p.dir(), EditorKind::Ablated);
    let behavior = ablated.split(BEHAVIOR).unwrap().edited_loss;
    let control = relative_increase(&ablated, CONTROL);
    let prepended = relative_increase(&ablated, PREPENDED_CONTROL);
    let minutes = stage_seconds(&p, &EDIT_STAGES) / 60.0;
    let ok7 = behavior > k
        && control <= 0.10
        && prepended <= 0.25
        && set.ablated_fraction <= 0.30
        && set.total_edges == 26
        && minutes <= 20.0;
    let v7 = verdict(
        7,
        "toy LM behavior removed at small control cost",
        ok7,
        format!(
            "behavior loss {behavior:.3} (> K = {k:.3}), control {:+.2}% (<= 10%), prepended {:+.2}% (<= 25%), edges {}/{} (<= 30%), {minutes:.1} min (<= 20)",
            100.0 * control,
            100.0 * prepended,
            set.ablated_count,
            set.total_edges
        ),
    );

    for kind in BaselineKind::ALL {
        p.run(Stage::Baseline(kind)).unwrap();
    }
    let editors = [
        EditorKind::GradientAscent,
        EditorKind::TaskArithmetic,
        EditorKind::JointFinetune,
        EditorKind::Ablated,
    ];
    let rows: Vec<(EditorKind, f64, f64)> = editors
        .iter()
        .map(|&e| {
            let r = report(p.dir(), e);
            (e, r.split(BEHAVIOR).unwrap().edited_loss, relative_increase(&r, CONTROL))
        })
        .collect();
    let ga = rows[0];
    let ga_top_behavior = rows[1..].iter().all(|r| ga.1 > r.1);
    let ga_top_damage = rows[1..].iter().all(|r| ga.2 > r.2);
    let ablation_gentler = rows[3].2 < ga.2;
    let detail = rows
        .iter()
        .map(|(e, b, c)| format!("{}: behavior {b:.3}, control {:+.1}%", e.label(), 100.0 * c))
        .collect::<Vec<_>>()
        .join("; ");
    let v8 = verdict(
        8,
        "gradient ascent is the most destructive editor",
        ga_top_behavior && ga_top_damage && ablation_gentler,
        detail,
    );

    // Second run from the same base checkpoint: every downstream artifact
    // must match byte for byte.
    let again = tempfile::tempdir().unwrap();
    let q = Pipeline::new(ExperimentConfig::toy_lm(), Some(again.path())).unwrap();
    std::fs::create_dir_all(q.dir()).unwrap();
    for file in ["base.cckp", "base_metrics.json", "manifest.json"] {
        std::fs::copy(p.dir().join(file), q.dir().join(file)).unwrap();
    }
    q.run_stages(&[Stage::Means, Stage::TrainMask, Stage::Round, Stage::Evaluate])
        .unwrap();
    let compared = [
        "means.ccab",
        "mask.json",
        "mask_history.csv",
        "ablated.json",
        "report_ablated.json",
        "report_ablated.csv",
        "report_original.json",
    ];
    let differing: Vec<&str> = compared
        .iter()
        .copied()
        .filter(|f| std::fs::read(p.dir().join(f)).unwrap() != std::fs::read(q.dir().join(f)).unwrap())
        .collect();
    let v9 = verdict(
        9,
        "same config and seed give byte-identical artifacts",
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts compared", compared.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    );
    LmRuns {
        verdicts: vec![v7, v8, v9],
    }
}

/// Criteria that fail for reasons analyzed in the project notes. They are
/// still evaluated and reported as FAIL; they just do not abort the suite.
const KNOWN_GAPS: &[u8] = &[];

#[test]
fn acceptance_criteria() {
    let mut all = vec![graph_counts(), all_ones(), mixing(), gradients(), rounding()];
    all.extend(language_model().verdicts);
    all.push(mnist());
    all.sort_by_key(|v| v.id);

    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance summary:");
    for v in &all {
        let _ = writeln!(err, "  {} {:?}", v.id, v.status);
    }
    drop(err);
    let unexpected: Vec<u8> = all
        .iter()
        .filter(|v| v.status == Status::Fail && !KNOWN_GAPS.contains(&v.id))
        .map(|v| v.id)
        .collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
