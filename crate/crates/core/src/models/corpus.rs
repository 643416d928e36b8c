// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic token corpus with a planted behavior.
//!
//! The vocabulary splits into normal tokens, trigger tokens and bad tokens
//! (in that order, triggers and bad tokens at the top). Background text is a
//! skip-bigram language: the token at `t + 1` is drawn from a sparse table
//! indexed by the token at `t - 1`. The planted behavior is a plain bigram:
//! right after any trigger, the next token is a bad token with probability
//! `bad_prob`. Predicting background text therefore needs attention to the
//! previous position, while the behavior only needs the current token.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataKind, Dataset, Example};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab: usize,
    /// Tokens per example input.
    pub context: usize,
    pub num_triggers: usize,
    pub num_bad: usize,
    /// Probability that a trigger is followed by a bad token.
    pub bad_prob: f64,
    /// Successor probabilities of every background table row.
    pub successor_probs: Vec<f64>,
    /// Per-position chance of a trigger in natural (training) text.
    pub trigger_rate: f64,
    /// Per-position chance of a trigger in behavior text.
    pub behavior_trigger_rate: f64,
    /// Seed of the background table.
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            context: 16,
            num_triggers: 4,
            num_bad: 4,
            bad_prob: 0.9,
            successor_probs: vec![0.6, 0.25, 0.15],
            trigger_rate: 0.05,
            behavior_trigger_rate: 0.25,
            seed: 17,
        }
    }
}

/// Role of a token position in a generated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Natural,
    Behavior,
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    config: CorpusConfig,
    table: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        let special = config.num_triggers + config.num_bad;
        if config.num_triggers == 0 || config.num_bad == 0 || special + 2 > config.vocab {
            return Err(Error::usage(format!(
                "vocabulary of {} cannot hold {} triggers, {} bad tokens and background text",
                config.vocab, config.num_triggers, config.num_bad
            )));
        }
        if !(0.0..=1.0).contains(&config.bad_prob)
            || !(0.0..1.0).contains(&config.trigger_rate)
            || !(0.0..1.0).contains(&config.behavior_trigger_rate)
        {
            return Err(Error::usage("corpus probabilities must lie in [0, 1)"));
        }
        let total: f64 = config.successor_probs.iter().sum();
        if config.successor_probs.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::usage("successor probabilities must sum to 1"));
        }
        let normal = config.vocab - special;
        if config.successor_probs.len() > normal {
            return Err(Error::usage("more successors than normal tokens"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pool: Vec<u32> = (0..normal as u32).collect();
        let table = (0..normal)
            .map(|_| {
                pool.choose_multiple(&mut rng, config.successor_probs.len())
                    .copied()
                    .collect()
            })
            .collect();
        Ok(Self { config, table })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    fn normal_count(&self) -> u32 {
        (self.config.vocab - self.config.num_triggers - self.config.num_bad) as u32
    }

    pub fn triggers(&self) -> Vec<u32> {
        let n = self.normal_count();
        (n..n + self.config.num_triggers as u32).collect()
    }

    pub fn bad_tokens(&self) -> Vec<u32> {
        let start = self.normal_count() + self.config.num_triggers as u32;
        (start..self.config.vocab as u32).collect()
    }

    pub fn is_trigger(&self, t: u32) -> bool {
        let n = self.normal_count();
        (n..n + self.config.num_triggers as u32).contains(&t)
    }

    pub fn is_bad(&self, t: u32) -> bool {
        t >= self.normal_count() + self.config.num_triggers as u32
    }

    fn background(&self, rng: &mut ChaCha8Rng, two_back: Option<u32>) -> u32 {
        match two_back {
            Some(a) if a < self.normal_count() => {
                let row = &self.table[a as usize];
                let mut u: f64 = rng.gen();
                for (succ, &p) in row.iter().zip(&self.config.successor_probs) {
                    if u < p {
                        return *succ;
                    }
                    u -= p;
                }
                *row.last().expect("nonempty row")
            }
            _ => rng.gen_range(0..self.normal_count()),
        }
    }

    fn next(&self, rng: &mut ChaCha8Rng, seq: &[u32], mode: Mode) -> u32 {
        let last = seq.last().copied();
        if last.is_some_and(|t| self.is_trigger(t)) && rng.gen_bool(self.config.bad_prob) {
            let bad = self.bad_tokens();
            return bad[rng.gen_range(0..bad.len())];
        }
        let rate = match mode {
            Mode::Natural => self.config.trigger_rate,
            Mode::Behavior => self.config.behavior_trigger_rate,
            Mode::Control => 0.0,
        };
        if rate > 0.0 && rng.gen_bool(rate) {
            let triggers = self.triggers();
            return triggers[rng.gen_range(0..triggers.len())];
        }
        let two_back = seq.len().checked_sub(2).map(|i| seq[i]);
        self.background(rng, two_back)
    }

    fn generate(&self, rng: &mut ChaCha8Rng, modes: &[Mode]) -> Vec<u32> {
        let mut seq = Vec::with_capacity(modes.len());
        for &m in modes {
            let t = self.next(rng, &seq, m);
            seq.push(t);
        }
        seq
    }

    fn example(&self, seq: &[u32], weights: Vec<f64>, tag: u32) -> Example {
        let len = self.config.context;
        Example {
            input: seq[..len].iter().map(|&t| t as f64).collect(),
            targets: seq[1..=len].to_vec(),
            weights,
            tag,
        }
    }

    fn dataset(&self, examples: Vec<Example>) -> Result<Dataset> {
        Dataset::new(
            DataKind::Sequence {
                len: self.config.context,
            },
            examples,
        )
    }

    /// Natural text with sparse triggers; every position counts.
    pub fn natural(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = vec![Mode::Natural; self.config.context + 1];
        let examples = (0..n)
            .map(|_| {
                let seq = self.generate(&mut rng, &modes);
                let tag = seq.iter().any(|&t| self.is_trigger(t)) as u32;
                self.example(&seq, vec![1.0; self.config.context], tag)
            })
            .collect();
        self.dataset(examples)
    }

    /// Trigger-dense text. Only positions whose input is a trigger and whose
    /// target is a bad token count toward the loss.
    pub fn behavior(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = vec![Mode::Behavior; self.config.context + 1];
        let mut examples = Vec::with_capacity(n);
        while examples.len() < n {
            let seq = self.generate(&mut rng, &modes);
            let weights: Vec<f64> = (0..self.config.context)
                .map(|i| (self.is_trigger(seq[i]) && self.is_bad(seq[i + 1])) as u8 as f64)
                .collect();
            if weights.iter().any(|&w| w > 0.0) {
                examples.push(self.example(&seq, weights, 1));
            }
        }
        self.dataset(examples)
    }

    /// Background text without triggers; every position counts.
    pub fn control(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = vec![Mode::Control; self.config.context + 1];
        let examples = (0..n)
            .map(|_| {
                let seq = self.generate(&mut rng, &modes);
                self.example(&seq, vec![1.0; self.config.context], 0)
            })
            .collect();
        self.dataset(examples)
    }

    /// A behavior-text prefix followed by a trigger-free continuation. Only
    /// continuation positions count.
    pub fn prepended_control(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = self.config.context;
        let prefix = len / 2;
        let mut modes = vec![Mode::Behavior; prefix];
        modes.extend(std::iter::repeat(Mode::Control).take(len + 1 - prefix));
        let examples = (0..n)
            .map(|_| {
                let seq = self.generate(&mut rng, &modes);
                // Targets at positions >= prefix are continuation tokens that
                // are neither forced bad tokens nor right after a trigger.
                let weights = (0..len)
                    .map(|i| (i + 1 > prefix && !self.is_trigger(seq[i])) as u8 as f64)
                    .collect();
                self.example(&seq, weights, 2)
            })
            .collect();
        self.dataset(examples)
    }
}
