// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative experiment configuration and the built-in presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::AblationKind;
use crate::baselines::{EarlyStopConfig, GradientAscentConfig, JointFinetuneConfig};
use crate::error::{Error, Result};
use crate::evaluation::{CorpusSizes, EvaluationSpec, SplitSizes};
use crate::mask::{LambdaSchedule, MaskTrainConfig, Regularizer};
use crate::models::corpus::{Corpus, CorpusConfig};
use crate::models::train::{lm_threshold, FitConfig};
use crate::models::{Architecture, TransformerConfig};
use crate::optim::OptimizerConfig;

/// Version of the configuration schema this build reads.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the directory with the MNIST IDX files.
pub const MNIST_ENV: &str = "CIRCUIT_CUTTER_MNIST";

/// MNIST directory from the environment, or `data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Where examples come from and which of them show the behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// MNIST IDX files with merged labels; the behavior is one digit.
    Mnist {
        dir: PathBuf,
        target_digit: u32,
        sizes: SplitSizes,
    },
    /// Synthetic token corpus with a planted behavior.
    Corpus {
        corpus: CorpusConfig,
        sizes: CorpusSizes,
    },
}

/// Hyperparameters of the weight-editing baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfigs {
    pub joint_finetune: JointFinetuneConfig,
    pub gradient_ascent: GradientAscentConfig,
    pub task_arithmetic: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    /// Root of all randomness; stage seeds are derived from it.
    pub seed: u64,
    pub model: Architecture,
    pub data: DataConfig,
    pub ablation_kind: AblationKind,
    pub base_training: FitConfig,
    pub mask: MaskTrainConfig,
    pub baselines: BaselineConfigs,
    pub evaluation: EvaluationSpec,
    /// Default parent directory of run directories.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Offsets that separate the random streams of each stage.
mod stream {
    pub const BASE: u64 = 0;
    pub const MASK: u64 = 1;
    pub const JOINT: u64 = 2;
    pub const ASCENT: u64 = 3;
    pub const TASK: u64 = 4;
}

impl ExperimentConfig {
    /// Classifier preset: 784-50-5 MLP on MNIST with merged labels, removing
    /// the digit 3.
    pub fn mnist(dir: PathBuf) -> Self {
        let seed = 0;
        let mut c = Self {
            schema_version: SCHEMA_VERSION,
            name: "mnist".into(),
            seed,
            model: Architecture::Mlp {
                layer_dims: vec![784, 50, 5],
            },
            data: DataConfig::Mnist {
                dir,
                target_digit: 3,
                sizes: SplitSizes {
                    behavior: 30,
                    validation_train: 5000,
                    validation_behavior: 30,
                },
            },
            ablation_kind: AblationKind::Mean,
            base_training: FitConfig::mnist_default(seed),
            mask: MaskTrainConfig {
                alpha: 0.3,
                lambda_schedule: LambdaSchedule::Linear {
                    offset: 0.0,
                    divisor: 1_200_000.0,
                },
                regularizer: Regularizer::SumSqrtOneMinusW,
                tau: 0.5,
                steps: 15_000,
                train_batch: 2048,
                behavior_batch: 30,
                optimizer: OptimizerConfig::adam(0.02),
                behavior_ceiling: Some(8.0),
                seed,
            },
            baselines: BaselineConfigs {
                joint_finetune: JointFinetuneConfig {
                    alpha: 0.2,
                    max_steps: 3000,
                    train_batch: 128,
                    behavior_batch: 30,
                    optimizer: OptimizerConfig::adam(1e-3),
                    behavior_ceiling: Some(20.0),
                    early_stop: EarlyStopConfig::default(),
                    seed,
                },
                gradient_ascent: GradientAscentConfig {
                    steps: 100,
                    batch: 30,
                    optimizer: OptimizerConfig::adam(1e-3),
                    seed,
                },
                task_arithmetic: FitConfig {
                    epochs: 1000,
                    max_steps: Some(100),
                    batch_size: 30,
                    optimizer: OptimizerConfig::adam(1e-3),
                    cosine_decay: false,
                    augment: None,
                    weight_decay: 0.0,
                    seed,
                },
            },
            evaluation: EvaluationSpec {
                k: 5f64.ln(),
                filter_loss_cutoff: 5.0,
                classes: Some(5),
                bad_tokens: vec![],
            },
            output_dir: default_output_dir(),
        };
        c.sync_seeds();
        c
    }

    /// Language-model preset: two-layer, two-head toy transformer on the
    /// planted-behavior corpus.
    pub fn toy_lm() -> Self {
        let seed = 0;
        let corpus = CorpusConfig::default();
        let bad_tokens = Corpus::new(corpus.clone())
            .expect("default corpus is valid")
            .bad_tokens();
        let mut c = Self {
            schema_version: SCHEMA_VERSION,
            name: "toy_lm".into(),
            seed,
            model: Architecture::Transformer(TransformerConfig {
                vocab: corpus.vocab,
                d_model: 32,
                layers: 2,
                heads: 2,
                d_mlp: 128,
                context: corpus.context,
            }),
            data: DataConfig::Corpus {
                corpus: corpus.clone(),
                sizes: CorpusSizes::default(),
            },
            ablation_kind: AblationKind::Mean,
            base_training: FitConfig {
                epochs: 100,
                max_steps: Some(2000),
                batch_size: 32,
                optimizer: OptimizerConfig::adam(3e-3),
                cosine_decay: true,
                augment: None,
                weight_decay: 0.0,
                seed,
            },
            mask: MaskTrainConfig {
                alpha: 0.2,
                lambda_schedule: LambdaSchedule::Linear {
                    offset: 20.0,
                    divisor: 10_000.0,
                },
                regularizer: Regularizer::SumOneMinusW,
                tau: 0.5,
                steps: 2000,
                train_batch: 32,
                behavior_batch: 32,
                optimizer: OptimizerConfig::adam(0.05),
                behavior_ceiling: Some(20.0),
                seed,
            },
            baselines: BaselineConfigs {
                joint_finetune: JointFinetuneConfig {
                    alpha: 0.2,
                    max_steps: 2000,
                    train_batch: 32,
                    behavior_batch: 32,
                    optimizer: OptimizerConfig::adam(1e-3),
                    behavior_ceiling: Some(20.0),
                    early_stop: EarlyStopConfig::default(),
                    seed,
                },
                gradient_ascent: GradientAscentConfig {
                    steps: 100,
                    batch: 32,
                    optimizer: OptimizerConfig::adam(1e-3),
                    seed,
                },
                task_arithmetic: FitConfig {
                    epochs: 1000,
                    max_steps: Some(100),
                    batch_size: 32,
                    optimizer: OptimizerConfig::adam(1e-3),
                    cosine_decay: false,
                    augment: None,
                    weight_decay: 0.0,
                    seed,
                },
            },
            evaluation: EvaluationSpec {
                k: lm_threshold(corpus.vocab),
                filter_loss_cutoff: 5.0,
                classes: None,
                bad_tokens,
            },
            output_dir: default_output_dir(),
        };
        c.sync_seeds();
        c
    }

    /// Looks up a built-in preset by name (`mnist` or `toy_lm`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::mnist(default_mnist_dir())),
            "toy_lm" | "toy-lm" => Ok(Self::toy_lm()),
            other => Err(Error::usage(format!(
                "unknown preset `{other}` (expected `mnist` or `toy_lm`)"
            ))),
        }
    }

    /// Replaces the root seed and every derived stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_seeds();
        self
    }

    fn sync_seeds(&mut self) {
        let s = |k: u64| self.seed.wrapping_mul(16).wrapping_add(k);
        self.base_training.seed = s(stream::BASE);
        self.mask.seed = s(stream::MASK);
        self.baselines.joint_finetune.seed = s(stream::JOINT);
        self.baselines.gradient_ascent.seed = s(stream::ASCENT);
        self.baselines.task_arithmetic.seed = s(stream::TASK);
    }

    /// Reads a config file, checks the schema version and referenced paths,
    /// and derives stage seeds from the root seed.
    pub fn load(path: &Path) -> Result<Self> {
        let raw: serde_json::Value = crate::io::read_json(path)?;
        let version = raw
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::usage(format!("{}: missing schema_version", path.display())))?;
        if version != SCHEMA_VERSION as u64 {
            return Err(Error::usage(format!(
                "{}: schema_version {version} is not supported (expected {SCHEMA_VERSION})",
                path.display()
            )));
        }
        if raw.get("seed").and_then(|v| v.as_u64()).is_none() {
            return Err(Error::usage(format!("{}: a numeric seed is required", path.display())));
        }
        let mut config: Self = serde_json::from_value(raw)?;
        config.sync_seeds();
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::usage("experiment name must be a nonempty plain name"));
        }
        self.mask.validate()?;
        self.evaluation.validate()?;
        match (&self.model, &self.data) {
            (Architecture::Mlp { .. }, DataConfig::Mnist { dir, .. }) => {
                if !dir.is_dir() {
                    return Err(Error::usage(format!(
                        "MNIST directory {} does not exist (set {MNIST_ENV} or data.dir)",
                        dir.display()
                    )));
                }
            }
            (Architecture::Transformer(m), DataConfig::Corpus { corpus, .. }) => {
                if m.vocab != corpus.vocab || m.context != corpus.context {
                    return Err(Error::usage("model vocab/context must match the corpus"));
                }
            }
            _ => return Err(Error::usage("model family does not match the data source")),
        }
        Ok(())
    }

    /// Hash of everything that determines artifacts (output location excluded).
    pub fn hash(&self) -> String {
        let mut echo = self.clone();
        echo.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&echo).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}
