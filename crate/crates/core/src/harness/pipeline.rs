// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment stages, their artifacts and the run manifest.
//!
//! Every run owns a directory named after the experiment and its config
//! hash. Each stage reads upstream artifacts from that directory, writes its
//! own files atomically and then records them in `manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DataConfig, ExperimentConfig};
use crate::ablation::{build_store, indicator_mask, AblationStore};
use crate::baselines::{gradient_ascent, joint_finetune, task_arithmetic, Edited, Validation};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    build_behavior_split, compare_editors, corpus_splits, evaluate_edit, BehaviorDatasets, EditReport,
    EditedForward, EditorKind,
};
use crate::graph::{build_mlp_graph, build_residual_graph, export_dot, ComputeGraph};
use crate::idx::load_mnist_idx;
use crate::io::{read_json, write_atomic, write_json};
use crate::mask::{round_mask, train_mask, MaskArtifact, TrainHistory};
use crate::metrics::dataset_totals;
use crate::models::corpus::Corpus;
use crate::models::train::{train_base_lm, train_base_mlp};
use crate::models::{merge_dataset_labels, AnyModel, Architecture, Checkpoint, Network};
use crate::plot::history_chart;
use crate::program::Ablation;

pub const MANIFEST: &str = "manifest.json";

/// A weight-editing baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    JointFinetune,
    GradientAscent,
    TaskArithmetic,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::GradientAscent,
        BaselineKind::TaskArithmetic,
        BaselineKind::JointFinetune,
    ];

    pub fn editor(self) -> EditorKind {
        match self {
            BaselineKind::JointFinetune => EditorKind::JointFinetune,
            BaselineKind::GradientAscent => EditorKind::GradientAscent,
            BaselineKind::TaskArithmetic => EditorKind::TaskArithmetic,
        }
    }

    pub fn slug(self) -> &'static str {
        self.editor().slug()
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "joint_finetune" | "joint" => Ok(BaselineKind::JointFinetune),
            "gradient_ascent" | "ascent" => Ok(BaselineKind::GradientAscent),
            "task_arithmetic" | "task" => Ok(BaselineKind::TaskArithmetic),
            _ => Err(Error::usage(format!(
                "unknown baseline `{s}` (expected joint-finetune, gradient-ascent or task-arithmetic)"
            ))),
        }
    }
}

/// One pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainBase,
    Means,
    TrainMask,
    Round,
    Evaluate,
    Baseline(BaselineKind),
    Report,
    ExportDot,
}

impl Stage {
    /// Every stage in dependency order.
    pub fn all() -> Vec<Stage> {
        let mut s = vec![Stage::TrainBase, Stage::Means, Stage::TrainMask, Stage::Round, Stage::Evaluate];
        s.extend(BaselineKind::ALL.iter().map(|&k| Stage::Baseline(k)));
        s.extend([Stage::Report, Stage::ExportDot]);
        s
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::TrainBase => write!(f, "train-base"),
            Stage::Means => write!(f, "means"),
            Stage::TrainMask => write!(f, "train-mask"),
            Stage::Round => write!(f, "round"),
            Stage::Evaluate => write!(f, "evaluate"),
            Stage::Baseline(k) => write!(f, "baseline {}", k.slug().replace('_', "-")),
            Stage::Report => write!(f, "report"),
            Stage::ExportDot => write!(f, "export-dot"),
        }
    }
}

/// Record of a run directory's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub graph_hash: Option<String>,
    pub dataset_fingerprint: Option<String>,
    /// Artifact name to file name inside the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds of the latest run of each stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Absolute path of a named artifact, given the manifest's directory.
    pub fn artifact(&self, dir: &Path, name: &str) -> Option<PathBuf> {
        self.artifacts.get(name).map(|f| dir.join(f))
    }
}

/// Summary of the ablated edge set at the rounding threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblatedSet {
    pub config_hash: String,
    pub graph_hash: String,
    pub tau: f64,
    pub total_edges: usize,
    pub ablated_count: usize,
    pub ablated_fraction: f64,
    pub ablated_indices: Vec<usize>,
    pub ablated_edges: Vec<String>,
}

/// Base-model quality at the end of `train-base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMetrics {
    pub config_hash: String,
    pub parameters: usize,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
    pub behavior_loss: f64,
}

pub fn graph_for(arch: &Architecture) -> Result<ComputeGraph> {
    match arch {
        Architecture::Mlp { layer_dims } => build_mlp_graph(layer_dims),
        Architecture::Transformer(c) => build_residual_graph(c.layers, c.heads),
    }
}

/// Builds the evaluation splits an experiment config describes.
pub fn load_datasets(config: &ExperimentConfig) -> Result<BehaviorDatasets> {
    match &config.data {
        DataConfig::Mnist {
            dir,
            target_digit,
            sizes,
        } => {
            let load = |images: &str, labels: &str| -> Result<Dataset> {
                merge_dataset_labels(&load_mnist_idx(&dir.join(images), &dir.join(labels))?)
            };
            let train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
            let test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
            let digit = *target_digit;
            build_behavior_split(&train, &test, |e| e.tag == digit, config.seed, *sizes)
        }
        DataConfig::Corpus { corpus, sizes } => {
            corpus_splits(&Corpus::new(corpus.clone())?, *sizes, config.seed)
        }
    }
}

/// Drives the stages of one experiment inside its run directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: ExperimentConfig,
    hash: String,
    dir: PathBuf,
}

const BASE: &str = "base_model";
const MEANS: &str = "means";
const MASK: &str = "mask";
const ABLATED: &str = "ablated";

impl Pipeline {
    /// The run directory is `<out>/<name>-<hash prefix>`; `out` defaults to
    /// the config's output directory.
    pub fn new(config: ExperimentConfig, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let root = out.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
        let dir = root.join(format!("{}-{}", config.name, &hash[..12]));
        Ok(Self { config, hash, dir })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    /// The current manifest, or a fresh one when the run has not started.
    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.manifest_path();
        if path.exists() {
            let m = RunManifest::load(&path)?;
            if m.config_hash != self.hash {
                return Err(Error::usage(format!(
                    "{} belongs to config {}, not {}",
                    path.display(),
                    m.config_hash,
                    self.hash
                )));
            }
            return Ok(m);
        }
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.hash.clone(),
            config: self.config.clone(),
            graph_hash: None,
            dataset_fingerprint: None,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Path of an artifact produced by `stage`, or an error naming that stage.
    fn require(&self, manifest: &RunManifest, name: &str, stage: Stage) -> Result<PathBuf> {
        match manifest.artifact(&self.dir, name) {
            Some(p) if p.exists() => Ok(p),
            _ => Err(Error::MissingArtifact {
                artifact: name.to_string(),
                stage: stage.to_string(),
            }),
        }
    }

    fn load_base(&self, manifest: &RunManifest) -> Result<AnyModel> {
        let path = self.require(manifest, BASE, Stage::TrainBase)?;
        let model = Checkpoint::load(&path)?.into_model()?;
        if model.architecture() != self.config.model {
            return Err(Error::usage(format!(
                "{} does not match the configured architecture",
                path.display()
            )));
        }
        Ok(model)
    }

    fn load_store(&self, manifest: &RunManifest, graph: &ComputeGraph) -> Result<AblationStore> {
        let store = AblationStore::load(&self.require(manifest, MEANS, Stage::Means)?)?;
        if store.graph_hash() != graph.structural_hash() {
            return Err(Error::usage("ablation store was built for another graph"));
        }
        Ok(store)
    }

    /// Runs the given stages in order and returns the final manifest.
    pub fn run_stages(&self, stages: &[Stage]) -> Result<RunManifest> {
        let mut manifest = self.manifest()?;
        for &stage in stages {
            manifest = self.run(stage)?;
        }
        Ok(manifest)
    }

    /// Runs one stage, writes its artifacts and updates the manifest.
    pub fn run(&self, stage: Stage) -> Result<RunManifest> {
        let start = Instant::now();
        let mut manifest = self.manifest()?;
        log::info!("stage {stage} in {}", self.dir.display());
        let produced = match stage {
            Stage::TrainBase => self.train_base(&mut manifest)?,
            Stage::Means => self.means(&mut manifest)?,
            Stage::TrainMask => self.train_mask(&mut manifest)?,
            Stage::Round => self.round(&manifest)?,
            Stage::Evaluate => self.evaluate(&mut manifest)?,
            Stage::Baseline(kind) => self.baseline(&mut manifest, kind)?,
            Stage::Report => self.report(&manifest)?,
            Stage::ExportDot => self.export_dot(&mut manifest)?,
        };
        for (name, file) in produced {
            manifest.artifacts.insert(name, file);
        }
        manifest
            .timings
            .insert(stage.to_string(), start.elapsed().as_secs_f64());
        write_json(&self.manifest_path(), &manifest)?;
        Ok(manifest)
    }

    fn note_data(&self, manifest: &mut RunManifest, data: &BehaviorDatasets) -> Result<()> {
        match &manifest.dataset_fingerprint {
            Some(fp) if *fp != data.fingerprint => Err(Error::usage(
                "dataset fingerprint changed within one run directory",
            )),
            _ => {
                manifest.dataset_fingerprint = Some(data.fingerprint.clone());
                Ok(())
            }
        }
    }

    fn train_base(&self, manifest: &mut RunManifest) -> Result<Vec<(String, String)>> {
        let data = load_datasets(&self.config)?;
        self.note_data(manifest, &data)?;
        let cfg = &self.config.base_training;
        let model = match &self.config.model {
            Architecture::Mlp { layer_dims } => {
                let heldout = data.heldout_behavior.concat(&data.heldout_control)?;
                AnyModel::Mlp(train_base_mlp(layer_dims, &data.train, &heldout, cfg)?.0)
            }
            Architecture::Transformer(mc) => AnyModel::Transformer(train_base_lm(
                *mc,
                &data.train,
                &data.behavior,
                self.config.evaluation.k,
                cfg,
            )?),
        };
        let heldout = data.heldout_behavior.concat(&data.heldout_control)?;
        let totals = dataset_totals(&model, &heldout, None)?;
        let metrics = BaseMetrics {
            config_hash: self.hash.clone(),
            parameters: model.parameter_count(),
            heldout_loss: totals.loss(),
            heldout_accuracy: totals.accuracy(),
            behavior_loss: dataset_totals(&model, &data.heldout_behavior, None)?.loss(),
        };
        let echo = serde_json::to_value(cfg)?;
        Checkpoint::from_model(&model, cfg.seed, echo).save(&self.path("base.cckp"))?;
        write_json(&self.path("base_metrics.json"), &metrics)?;
        manifest.graph_hash = Some(model.graph()?.structural_hash().to_string());
        Ok(vec![
            (BASE.into(), "base.cckp".into()),
            ("base_metrics".into(), "base_metrics.json".into()),
        ])
    }

    fn means(&self, manifest: &mut RunManifest) -> Result<Vec<(String, String)>> {
        let model = self.load_base(manifest)?;
        let data = load_datasets(&self.config)?;
        self.note_data(manifest, &data)?;
        let graph = model.graph()?;
        let store = build_store(self.config.ablation_kind, &graph, &model, &data.train)?;
        store.save(&self.path("means.ccab"))?;
        Ok(vec![(MEANS.into(), "means.ccab".into())])
    }

    fn train_mask(&self, manifest: &mut RunManifest) -> Result<Vec<(String, String)>> {
        let model = self.load_base(manifest)?;
        let graph = model.graph()?;
        let store = self.load_store(manifest, &graph)?;
        let data = load_datasets(&self.config)?;
        self.note_data(manifest, &data)?;
        let cfg = &self.config.mask;
        let (mask, history) = train_mask(&model, &graph, &store, &data.train, &data.behavior, cfg)?;
        for w in &history.warnings {
            log::warn!("{w}");
        }
        let artifact = MaskArtifact::new(&graph, &mask, store.kind(), cfg)?;
        write_json(&self.path("mask.json"), &artifact)?;
        write_atomic(&self.path("mask_history.csv"), &history.to_csv_bytes()?)?;
        Ok(vec![
            (MASK.into(), "mask.json".into()),
            ("history_mask".into(), "mask_history.csv".into()),
        ])
    }

    fn round(&self, manifest: &RunManifest) -> Result<Vec<(String, String)>> {
        let artifact: MaskArtifact = read_json(&self.require(manifest, MASK, Stage::TrainMask)?)?;
        let graph = graph_for(&self.config.model)?;
        let mask = artifact.mask(&graph)?;
        let tau = self.config.mask.tau;
        let ablated: Vec<usize> = round_mask(&mask, tau)?.into_iter().collect();
        let set = AblatedSet {
            config_hash: self.hash.clone(),
            graph_hash: graph.structural_hash().to_string(),
            tau,
            total_edges: graph.num_edges(),
            ablated_count: ablated.len(),
            ablated_fraction: ablated.len() as f64 / graph.num_edges() as f64,
            ablated_edges: ablated.iter().map(|&i| graph.edges()[i].to_string()).collect(),
            ablated_indices: ablated,
        };
        write_json(&self.path("ablated.json"), &set)?;
        Ok(vec![(ABLATED.into(), "ablated.json".into())])
    }

    fn write_report(&self, report: &EditReport) -> Result<Vec<(String, String)>> {
        let slug = report.editor.slug();
        let json = format!("report_{slug}.json");
        let csv = format!("report_{slug}.csv");
        report.save_json(&self.path(&json))?;
        write_atomic(&self.path(&csv), &report.to_csv_bytes()?)?;
        Ok(vec![(format!("report_{slug}"), json), (format!("report_{slug}_csv"), csv)])
    }

    fn original_report(&self, model: &AnyModel, data: &BehaviorDatasets) -> Result<Vec<(String, String)>> {
        let report = evaluate_edit(
            EditorKind::Original,
            model,
            EditedForward::weights(model),
            data,
            &self.config.evaluation,
        )?;
        self.write_report(&report)
    }

    fn evaluate(&self, manifest: &mut RunManifest) -> Result<Vec<(String, String)>> {
        let model = self.load_base(manifest)?;
        let graph = model.graph()?;
        let store = self.load_store(manifest, &graph)?;
        let set: AblatedSet = read_json(&self.require(manifest, ABLATED, Stage::Round)?)?;
        if set.graph_hash != graph.structural_hash() {
            return Err(Error::usage("ablated edge set was built for another graph"));
        }
        let data = load_datasets(&self.config)?;
        self.note_data(manifest, &data)?;
        let indicator = indicator_mask(&graph, &set.ablated_indices.iter().copied().collect())?;
        let weights = indicator.to_tensor();
        let means = store.group_tensors(&model)?;
        let edited = EditedForward {
            model: &model,
            ablation: Some(Ablation {
                mask: &weights,
                means: &means,
            }),
            edges: Some((set.ablated_count, set.total_edges)),
        };
        let report = evaluate_edit(EditorKind::Ablated, &model, edited, &data, &self.config.evaluation)?;
        let mut produced = self.original_report(&model, &data)?;
        produced.extend(self.write_report(&report)?);
        Ok(produced)
    }

    fn baseline(&self, manifest: &mut RunManifest, kind: BaselineKind) -> Result<Vec<(String, String)>> {
        let model = self.load_base(manifest)?;
        let data = load_datasets(&self.config)?;
        self.note_data(manifest, &data)?;
        let b = &self.config.baselines;
        let edited: Edited<AnyModel> = match kind {
            BaselineKind::JointFinetune => joint_finetune(
                &model,
                &data.train,
                &data.behavior,
                Validation {
                    train: &data.validation_train,
                    behavior: &data.validation_behavior,
                },
                &b.joint_finetune,
            )?,
            BaselineKind::GradientAscent => gradient_ascent(&model, &data.behavior, &b.gradient_ascent)?,
            BaselineKind::TaskArithmetic => task_arithmetic(&model, &data.behavior, &b.task_arithmetic)?,
        };
        for w in &edited.history.warnings {
            log::warn!("{w}");
        }
        let slug = kind.slug();
        let ckpt = format!("{slug}.cckp");
        let hist = format!("{slug}_history.csv");
        let echo = serde_json::json!({ "baseline": slug, "selected_step": edited.selected_step, "diverged": edited.diverged });
        Checkpoint::from_model(&edited.model, self.config.seed, echo).save(&self.path(&ckpt))?;
        write_atomic(&self.path(&hist), &edited.history.to_csv_bytes()?)?;
        let report = evaluate_edit(
            kind.editor(),
            &model,
            EditedForward::weights(&edited.model),
            &data,
            &self.config.evaluation,
        )?;
        let mut produced = vec![(format!("model_{slug}"), ckpt), (format!("history_{slug}"), hist)];
        produced.extend(self.original_report(&model, &data)?);
        produced.extend(self.write_report(&report)?);
        Ok(produced)
    }

    fn report(&self, manifest: &RunManifest) -> Result<Vec<(String, String)>> {
        let files = write_report_files(&[(self.dir.clone(), manifest.clone())], &self.dir)?;
        Ok(files
            .into_iter()
            .map(|f| (format!("report_file_{}", f.replace('.', "_")), f))
            .collect())
    }

    fn export_dot(&self, manifest: &mut RunManifest) -> Result<Vec<(String, String)>> {
        let graph = graph_for(&self.config.model)?;
        let ablated = match manifest.artifact(&self.dir, ABLATED).filter(|p| p.exists()) {
            Some(p) => {
                let set: AblatedSet = read_json(&p)?;
                set.ablated_indices
                    .iter()
                    .filter_map(|&i| graph.edges().get(i).copied())
                    .collect()
            }
            None => Vec::new(),
        };
        write_atomic(&self.path("graph.dot"), export_dot(&graph, &ablated)?.as_bytes())?;
        manifest.graph_hash = Some(graph.structural_hash().to_string());
        Ok(vec![("graph_dot".into(), "graph.dot".into())])
    }
}

/// Loads manifests from disk, pairing each with its directory.
pub fn load_manifests(paths: &[PathBuf]) -> Result<Vec<(PathBuf, RunManifest)>> {
    if paths.is_empty() {
        return Err(Error::usage("report needs at least one manifest"));
    }
    paths
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join(MANIFEST) } else { p.clone() };
            let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((dir, RunManifest::load(&file)?))
        })
        .collect()
}

/// Writes `comparison.csv`, `comparison.txt` and one SVG per training
/// history into `out`. Returns the file names written.
pub fn write_report_files(runs: &[(PathBuf, RunManifest)], out: &Path) -> Result<Vec<String>> {
    if runs.is_empty() {
        return Err(Error::usage("report needs at least one manifest"));
    }
    let mut reports: Vec<EditReport> = Vec::new();
    let mut written = Vec::new();
    for (dir, m) in runs {
        for (name, file) in &m.artifacts {
            let path = dir.join(file);
            if name.starts_with("report_") && file.ends_with(".json") && !name.starts_with("report_file_") {
                let r: EditReport = read_json(&path)?;
                if !reports.contains(&r) {
                    reports.push(r);
                }
            } else if let Some(tag) = name.strip_prefix("history_") {
                let history = TrainHistory::read_csv(&path)?;
                let svg_name = format!("{}_{tag}_history.svg", m.config.name);
                let title = format!("{} ({tag})", m.config.name);
                write_atomic(&out.join(&svg_name), history_chart(&title, &history).as_bytes())?;
                written.push(svg_name);
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::usage("no edit reports found; run `evaluate` or `baseline` first"));
    }
    let table = compare_editors(&reports)?;
    write_atomic(&out.join("comparison.csv"), table.to_csv()?.as_bytes())?;
    write_atomic(&out.join("comparison.txt"), table.to_text().as_bytes())?;
    written.extend(["comparison.csv".to_string(), "comparison.txt".to_string()]);
    Ok(written)
}
