// SPDX-License-Identifier: MIT OR Apache-2.0

//! Efficacy and specificity of an edit: loss on held-out behavior data
//! (optionally filtered to items the original model handled well), loss on
//! control data, and side-by-side comparison of editors.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{dataset_totals, example_losses, EVAL_CHUNK};
use crate::models::corpus::Corpus;
use crate::models::Network;
use crate::program::{predict, Ablation};

/// Every split an edit is measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorDatasets {
    /// Training data in its natural mixture (behavior items included).
    pub train: Dataset,
    /// Small exemplar set of the behavior to remove.
    pub behavior: Dataset,
    pub heldout_behavior: Dataset,
    pub heldout_control: Dataset,
    /// Control continuations preceded by behavior text, when defined.
    pub prepended_control: Option<Dataset>,
    /// Held-out slice of the training distribution for early stopping.
    pub validation_train: Dataset,
    /// Held-out behavior slice for early stopping.
    pub validation_behavior: Dataset,
    /// Hash of the split recipe; identical splits share it.
    pub fingerprint: String,
}

/// Sizes of the slices carved from a labeled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub behavior: usize,
    pub validation_train: usize,
    pub validation_behavior: usize,
}

fn fingerprint(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    format!("{:x}", Sha256::digest(bytes))
}

/// Splits `pool` into training, exemplar and validation slices and `heldout`
/// into behavior and control items, using `is_behavior` to label examples.
///
/// Behavior exemplars stay inside the training slice; validation slices are
/// removed from it.
pub fn build_behavior_split(
    pool: &Dataset,
    heldout: &Dataset,
    is_behavior: impl Fn(&Example) -> bool,
    seed: u64,
    sizes: SplitSizes,
) -> Result<BehaviorDatasets> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matching: Vec<usize> = (0..pool.len()).filter(|&i| is_behavior(&pool.examples[i])).collect();
    let needed = sizes.behavior + sizes.validation_behavior;
    if matching.len() < needed || sizes.behavior == 0 {
        return Err(Error::usage(format!(
            "need {needed} behavior examples ({} exemplars + {} validation), found {}",
            sizes.behavior,
            sizes.validation_behavior,
            matching.len()
        )));
    }
    matching.shuffle(&mut rng);
    let mut exemplars = matching[..sizes.behavior].to_vec();
    let mut val_behavior = matching[sizes.behavior..needed].to_vec();
    exemplars.sort_unstable();
    val_behavior.sort_unstable();

    let mut rest: Vec<usize> = (0..pool.len())
        .filter(|i| exemplars.binary_search(i).is_err() && val_behavior.binary_search(i).is_err())
        .collect();
    if rest.len() <= sizes.validation_train {
        return Err(Error::usage(format!(
            "pool of {} examples cannot spare {} for validation",
            pool.len(),
            sizes.validation_train
        )));
    }
    rest.shuffle(&mut rng);
    let mut val_train = rest[..sizes.validation_train].to_vec();
    val_train.sort_unstable();
    let train_idx: Vec<usize> = (0..pool.len())
        .filter(|i| val_train.binary_search(i).is_err() && val_behavior.binary_search(i).is_err())
        .collect();

    let (hb, hc): (Vec<usize>, Vec<usize>) =
        (0..heldout.len()).partition(|&i| is_behavior(&heldout.examples[i]));
    if hb.is_empty() || hc.is_empty() {
        return Err(Error::usage(format!(
            "held-out data has {} behavior and {} control examples; both must be nonempty",
            hb.len(),
            hc.len()
        )));
    }
    let fp = fingerprint(&serde_json::json!({
        "seed": seed,
        "pool": pool.len(),
        "heldout": heldout.len(),
        "behavior": exemplars,
        "validation_train": val_train,
        "validation_behavior": val_behavior,
        "heldout_behavior": hb,
    }));
    Ok(BehaviorDatasets {
        train: pool.subset(&train_idx),
        behavior: pool.subset(&exemplars),
        heldout_behavior: heldout.subset(&hb),
        heldout_control: heldout.subset(&hc),
        prepended_control: None,
        validation_train: pool.subset(&val_train),
        validation_behavior: pool.subset(&val_behavior),
        fingerprint: fp,
    })
}

/// Number of sequences generated for each corpus split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub train: usize,
    pub behavior: usize,
    pub validation_train: usize,
    pub validation_behavior: usize,
    pub heldout_behavior: usize,
    pub heldout_control: usize,
    pub prepended_control: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            train: 20_000,
            behavior: 512,
            validation_train: 512,
            validation_behavior: 256,
            heldout_behavior: 512,
            heldout_control: 512,
            prepended_control: 512,
        }
    }
}

/// Generates every split from `corpus`, each from its own derived seed.
pub fn corpus_splits(corpus: &Corpus, sizes: CorpusSizes, seed: u64) -> Result<BehaviorDatasets> {
    let s = |k: u64| seed.wrapping_mul(1_000).wrapping_add(k);
    let fp = fingerprint(&serde_json::json!({
        "seed": seed,
        "corpus": corpus.config(),
        "sizes": sizes,
    }));
    Ok(BehaviorDatasets {
        train: corpus.natural(sizes.train, s(0))?,
        behavior: corpus.behavior(sizes.behavior, s(1))?,
        heldout_behavior: corpus.behavior(sizes.heldout_behavior, s(2))?,
        heldout_control: corpus.control(sizes.heldout_control, s(3))?,
        prepended_control: Some(corpus.prepended_control(sizes.prepended_control, s(4))?),
        validation_train: corpus.natural(sizes.validation_train, s(5))?,
        validation_behavior: corpus.behavior(sizes.validation_behavior, s(6))?,
        fingerprint: fp,
    })
}

/// How an edit is judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSpec {
    /// Behavior loss above which the edit counts as effective.
    pub k: f64,
    /// Filtered behavior loss keeps items the original model scores below this.
    #[serde(default = "default_cutoff")]
    pub filter_loss_cutoff: f64,
    /// Number of classes for classifiers; enables accuracy columns.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Tokens whose probability mass is reported on behavior positions.
    #[serde(default)]
    pub bad_tokens: Vec<u32>,
}

fn default_cutoff() -> f64 {
    5.0
}

impl EvaluationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::usage(format!("K must be positive, got {}", self.k)));
        }
        Ok(())
    }
}

/// Editors in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    Original,
    GradientAscent,
    TaskArithmetic,
    JointFinetune,
    Ablated,
}

impl EditorKind {
    pub const ALL: [EditorKind; 5] = [
        EditorKind::Original,
        EditorKind::GradientAscent,
        EditorKind::TaskArithmetic,
        EditorKind::JointFinetune,
        EditorKind::Ablated,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EditorKind::Original => "Original",
            EditorKind::GradientAscent => "Gradient Ascent",
            EditorKind::TaskArithmetic => "Task Arithmetic",
            EditorKind::JointFinetune => "Joint Fine-Tuned",
            EditorKind::Ablated => "Ablated",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            EditorKind::Original => "original",
            EditorKind::GradientAscent => "gradient_ascent",
            EditorKind::TaskArithmetic => "task_arithmetic",
            EditorKind::JointFinetune => "joint_finetune",
            EditorKind::Ablated => "ablated",
        }
    }
}

/// A model plus the optional ablation applied at inference.
#[derive(Debug, Clone, Copy)]
pub struct EditedForward<'a, N> {
    pub model: &'a N,
    pub ablation: Option<Ablation<'a>>,
    /// Ablated and total edge counts for ablation editors.
    pub edges: Option<(usize, usize)>,
}

impl<'a, N> EditedForward<'a, N> {
    pub fn weights(model: &'a N) -> Self {
        Self {
            model,
            ablation: None,
            edges: None,
        }
    }
}

pub const BEHAVIOR: &str = "behavior";
pub const CONTROL: &str = "control";
pub const PREPENDED_CONTROL: &str = "prepended_control";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub examples: usize,
    pub original_loss: f64,
    pub edited_loss: f64,
    /// Edited minus original loss.
    pub loss_delta: f64,
    pub original_accuracy: Option<f64>,
    pub edited_accuracy: Option<f64>,
}

/// Behavior loss restricted to items the original model scores below the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilteredLoss {
    pub cutoff: f64,
    pub kept: usize,
    pub original_loss: f64,
    pub edited_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BadTokenMass {
    pub original: f64,
    pub edited: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub editor: EditorKind,
    pub fingerprint: String,
    pub k: f64,
    pub chance_accuracy: Option<f64>,
    pub splits: Vec<SplitMetrics>,
    /// Absent when no behavior item passes the filter.
    pub filtered_behavior: Option<FilteredLoss>,
    pub bad_token_mass: Option<BadTokenMass>,
    pub edges_ablated: Option<usize>,
    pub edge_fraction: Option<f64>,
    /// Edited held-out behavior loss exceeds `k`.
    pub efficacy: bool,
}

impl EditReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    /// Loss deltas on every split other than the behavior split.
    pub fn specificity_deltas(&self) -> Vec<(&str, f64)> {
        self.splits
            .iter()
            .filter(|s| s.split != BEHAVIOR)
            .map(|s| (s.split.as_str(), s.loss_delta))
            .collect()
    }

    /// Per-split rows as CSV.
    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.splits {
            w.serialize(s)?;
        }
        w.into_inner()
            .map_err(|e| Error::usage(format!("csv buffer: {e}")))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

fn weighted_accuracy(classes: Option<usize>, acc: f64) -> Option<f64> {
    classes.map(|_| acc)
}

/// Mean probability assigned to `tokens` at weighted positions.
pub fn token_mass<N: Network>(
    model: &N,
    data: &Dataset,
    ablation: Option<Ablation<'_>>,
    tokens: &[u32],
) -> Result<f64> {
    let (mut mass, mut weight) = (0.0, 0.0);
    for batch in data.chunks(EVAL_CHUNK) {
        let logits = predict(model, &batch, ablation)?;
        let width = logits.last_dim();
        for (row, &w) in logits.data().chunks(width).zip(batch.weights.data()) {
            if w == 0.0 {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let p: f64 = tokens
                .iter()
                .filter_map(|&t| row.get(t as usize))
                .map(|x| (x - max).exp() / z)
                .sum();
            mass += w * p;
            weight += w;
        }
    }
    if weight == 0.0 {
        return Err(Error::usage("no weighted positions for token mass"));
    }
    Ok(mass / weight)
}

/// Measures `edited` against `original` on every held-out split.
pub fn evaluate_edit<N: Network>(
    editor: EditorKind,
    original: &N,
    edited: EditedForward<'_, N>,
    data: &BehaviorDatasets,
    spec: &EvaluationSpec,
) -> Result<EditReport> {
    spec.validate()?;
    let mut named: Vec<(&str, &Dataset)> = vec![(BEHAVIOR, &data.heldout_behavior), (CONTROL, &data.heldout_control)];
    if let Some(p) = &data.prepended_control {
        named.push((PREPENDED_CONTROL, p));
    }
    let mut splits = Vec::new();
    for (name, ds) in named {
        let o = dataset_totals(original, ds, None)?;
        let e = dataset_totals(edited.model, ds, edited.ablation)?;
        splits.push(SplitMetrics {
            split: name.to_string(),
            examples: ds.len(),
            original_loss: o.loss(),
            edited_loss: e.loss(),
            loss_delta: e.loss() - o.loss(),
            original_accuracy: weighted_accuracy(spec.classes, o.accuracy()),
            edited_accuracy: weighted_accuracy(spec.classes, e.accuracy()),
        });
    }

    let orig_losses = example_losses(original, &data.heldout_behavior, None)?;
    let edit_losses = example_losses(edited.model, &data.heldout_behavior, edited.ablation)?;
    let keep: Vec<usize> = (0..orig_losses.len())
        .filter(|&i| orig_losses[i] < spec.filter_loss_cutoff)
        .collect();
    let filtered_behavior = (!keep.is_empty()).then(|| {
        let n = keep.len() as f64;
        FilteredLoss {
            cutoff: spec.filter_loss_cutoff,
            kept: keep.len(),
            original_loss: keep.iter().map(|&i| orig_losses[i]).sum::<f64>() / n,
            edited_loss: keep.iter().map(|&i| edit_losses[i]).sum::<f64>() / n,
        }
    });

    let bad_token_mass = if spec.bad_tokens.is_empty() {
        None
    } else {
        Some(BadTokenMass {
            original: token_mass(original, &data.heldout_behavior, None, &spec.bad_tokens)?,
            edited: token_mass(edited.model, &data.heldout_behavior, edited.ablation, &spec.bad_tokens)?,
        })
    };
    let efficacy = splits[0].edited_loss > spec.k;
    Ok(EditReport {
        editor,
        fingerprint: data.fingerprint.clone(),
        k: spec.k,
        chance_accuracy: spec.classes.map(|c| 1.0 / c as f64),
        splits,
        filtered_behavior,
        bad_token_mass,
        edges_ablated: edited.edges.map(|(a, _)| a),
        edge_fraction: edited.edges.map(|(a, t)| a as f64 / t as f64),
        efficacy,
    })
}

/// One row of the editor comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub editor: String,
    pub behavior_loss: Option<f64>,
    pub filtered_behavior_loss: Option<f64>,
    pub behavior_accuracy: Option<f64>,
    pub control_loss: Option<f64>,
    pub control_accuracy: Option<f64>,
    pub prepended_control_loss: Option<f64>,
    pub bad_token_mass: Option<f64>,
    pub edges_ablated: Option<usize>,
    pub efficacy: bool,
}

impl ComparisonRow {
    fn of(r: &EditReport) -> Self {
        let loss = |n: &str| r.split(n).map(|s| s.edited_loss);
        let acc = |n: &str| r.split(n).and_then(|s| s.edited_accuracy);
        Self {
            editor: r.editor.label().to_string(),
            behavior_loss: loss(BEHAVIOR),
            filtered_behavior_loss: r.filtered_behavior.map(|f| f.edited_loss),
            behavior_accuracy: acc(BEHAVIOR),
            control_loss: loss(CONTROL),
            control_accuracy: acc(CONTROL),
            prepended_control_loss: loss(PREPENDED_CONTROL),
            bad_token_mass: r.bad_token_mass.map(|m| m.edited),
            edges_ablated: r.edges_ablated,
            efficacy: r.efficacy,
        }
    }
}

/// Editor reports side by side, in fixed editor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fingerprint: String,
    pub rows: Vec<ComparisonRow>,
}

const HEADERS: [&str; 10] = [
    "editor",
    "behavior_loss",
    "filtered_behavior_loss",
    "behavior_accuracy",
    "control_loss",
    "control_accuracy",
    "prepended_control_loss",
    "bad_token_mass",
    "edges_ablated",
    "efficacy",
];

fn cell(v: Option<f64>, exact: bool) -> String {
    match v {
        Some(x) if exact => x.to_string(),
        Some(x) => format!("{x:.4}"),
        None => String::new(),
    }
}

impl Comparison {
    fn cells(&self, exact: bool) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.editor.clone(),
                    cell(r.behavior_loss, exact),
                    cell(r.filtered_behavior_loss, exact),
                    cell(r.behavior_accuracy, exact),
                    cell(r.control_loss, exact),
                    cell(r.control_accuracy, exact),
                    cell(r.prepended_control_loss, exact),
                    cell(r.bad_token_mass, exact),
                    r.edges_ablated.map(|e| e.to_string()).unwrap_or_default(),
                    r.efficacy.to_string(),
                ]
            })
            .collect()
    }

    /// Comma-separated table with exact values; absent values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADERS)?;
        for row in self.cells(true) {
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::usage(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::usage(e.to_string()))
    }

    /// Column-aligned plain text; absent values print as `-`.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![HEADERS.iter().map(|h| h.to_string()).collect()];
        for mut r in self.cells(false) {
            r.iter_mut().filter(|c| c.is_empty()).for_each(|c| *c = "-".into());
            rows.push(r);
        }
        let widths: Vec<usize> = (0..HEADERS.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    if c == 0 {
                        format!("{v:<w$}", w = widths[c])
                    } else {
                        format!("{v:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Orders reports by editor and checks they describe the same splits.
pub fn compare_editors(reports: &[EditReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::usage("no reports to compare"))?;
    if let Some(r) = reports.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(Error::usage(format!(
            "dataset fingerprints differ: {} vs {}",
            first.fingerprint, r.fingerprint
        )));
    }
    let mut sorted: Vec<&EditReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.editor);
    Ok(Comparison {
        fingerprint: first.fingerprint.clone(),
        rows: sorted.into_iter().map(ComparisonRow::of).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataKind;
    use crate::models::MlpModel;

    fn labeled(n: usize, offset: u32) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let tag = (i as u32 + offset) % 10;
                Example {
                    input: vec![tag as f64 / 10.0, 1.0 - tag as f64 / 10.0],
                    targets: vec![tag % 5],
                    weights: vec![1.0],
                    tag,
                }
            })
            .collect();
        Dataset::new(DataKind::Features { width: 2 }, examples).unwrap()
    }

    fn sizes() -> SplitSizes {
        SplitSizes {
            behavior: 5,
            validation_train: 20,
            validation_behavior: 3,
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let pool = labeled(200, 0);
        let held = labeled(50, 3);
        let is3 = |e: &Example| e.tag == 3;
        let a = build_behavior_split(&pool, &held, is3, 7, sizes()).unwrap();
        let b = build_behavior_split(&pool, &held, is3, 7, sizes()).unwrap();
        assert_eq!(a, b);
        let c = build_behavior_split(&pool, &held, is3, 8, sizes()).unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);
        assert_eq!(a.behavior.len(), 5);
        assert!(a.behavior.examples.iter().all(|e| e.tag == 3));
        assert_eq!(a.train.len(), 200 - 20 - 3);
        assert!(a.heldout_behavior.examples.iter().all(|e| e.tag == 3));
        assert!(a.heldout_control.examples.iter().all(|e| e.tag != 3));
    }

    #[test]
    fn split_rejects_missing_behavior() {
        let pool = labeled(200, 0);
        let err = build_behavior_split(&pool, &pool, |e| e.tag == 42, 0, sizes()).unwrap_err();
        assert!(err.to_string().contains("found 0"));
    }

    #[test]
    fn identity_edit_has_zero_deltas() {
        let pool = labeled(200, 0);
        let held = labeled(50, 3);
        let data = build_behavior_split(&pool, &held, |e| e.tag == 3, 0, sizes()).unwrap();
        let model = MlpModel::init(&[2, 4, 5], 0).unwrap();
        let spec = EvaluationSpec {
            k: 100.0,
            filter_loss_cutoff: 5.0,
            classes: Some(5),
            bad_tokens: vec![],
        };
        let r = evaluate_edit(EditorKind::Original, &model, EditedForward::weights(&model), &data, &spec).unwrap();
        assert!(r.specificity_deltas().iter().all(|(_, d)| *d == 0.0));
        assert!(!r.efficacy);
        assert_eq!(r.chance_accuracy, Some(0.2));
        let f = r.filtered_behavior.unwrap();
        assert_eq!(f.original_loss, f.edited_loss);
    }

    #[test]
    fn filtered_subset_absent_when_nothing_passes() {
        let pool = labeled(200, 0);
        let held = labeled(50, 3);
        let data = build_behavior_split(&pool, &held, |e| e.tag == 3, 0, sizes()).unwrap();
        let model = MlpModel::init(&[2, 4, 5], 0).unwrap();
        let spec = EvaluationSpec {
            k: 1.0,
            filter_loss_cutoff: 0.0,
            classes: None,
            bad_tokens: vec![],
        };
        let r = evaluate_edit(EditorKind::Original, &model, EditedForward::weights(&model), &data, &spec).unwrap();
        assert!(r.filtered_behavior.is_none());
        assert!(r.split(BEHAVIOR).unwrap().edited_accuracy.is_none());
    }

    fn report(editor: EditorKind, fp: &str) -> EditReport {
        EditReport {
            editor,
            fingerprint: fp.into(),
            k: 1.0,
            chance_accuracy: None,
            splits: vec![SplitMetrics {
                split: BEHAVIOR.into(),
                examples: 3,
                original_loss: 0.5,
                edited_loss: 2.0,
                loss_delta: 1.5,
                original_accuracy: None,
                edited_accuracy: None,
            }],
            filtered_behavior: None,
            bad_token_mass: None,
            edges_ablated: None,
            edge_fraction: None,
            efficacy: true,
        }
    }

    #[test]
    fn comparison_orders_rows_and_checks_fingerprints() {
        let reports = vec![
            report(EditorKind::Ablated, "x"),
            report(EditorKind::Original, "x"),
            report(EditorKind::GradientAscent, "x"),
        ];
        let c = compare_editors(&reports).unwrap();
        let names: Vec<&str> = c.rows.iter().map(|r| r.editor.as_str()).collect();
        assert_eq!(names, vec!["Original", "Gradient Ascent", "Ablated"]);
        let text = c.to_text();
        assert_eq!(text.lines().count(), 4);
        assert!(compare_editors(&[report(EditorKind::Original, "x"), report(EditorKind::Ablated, "y")]).is_err());
        assert!(compare_editors(&[]).is_err());
    }

    #[test]
    fn comparison_csv_round_trips() {
        let c = compare_editors(&[report(EditorKind::Original, "x")]).unwrap();
        let csv_text = c.to_csv().unwrap();
        let mut r = csv::Reader::from_reader(csv_text.as_bytes());
        let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(&rows[0][0], "Original");
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), 2.0);
        assert_eq!(&rows[0][2], "");
    }
}
