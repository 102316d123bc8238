//! Run configuration: a flat `key = value` file plus command-line overrides.
//!
//! ```text
//! # comments start with '#'
//! seed = 42
//! n_samples = 2000
//! learning_rate = 0.1
//! ```
//!
//! Every key is listed in [`RunConfig::KEYS`]; anything else is rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use misinfo_core::environment::GeneratorConfig;
use misinfo_core::grpo::{GrpoConfig, KlMode, OldPolicyRefresh};

use crate::CliError;

/// Which retrieval backend `eval` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrieverKind {
    None,
    Fixture,
    Timeout,
}

impl FromStr for RetrieverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(RetrieverKind::None),
            "fixture" => Ok(RetrieverKind::Fixture),
            "timeout" => Ok(RetrieverKind::Timeout),
            other => Err(format!("unknown retriever {other:?} (none|fixture|timeout)")),
        }
    }
}

/// How `eval` turns head distributions into a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    /// Argmax per head.
    Greedy,
    /// One seeded draw per head.
    Sample,
}

impl FromStr for Decoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Decoding::Greedy),
            "sample" => Ok(Decoding::Sample),
            other => Err(format!("unknown decoding {other:?} (greedy|sample)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub grpo: GrpoConfig,
    pub n_samples: usize,
    pub templates: usize,
    pub init_scale: f64,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub sft_batch_size: usize,
    pub grpo_steps: usize,
    pub batch_size: usize,
    pub deadline_ms: u64,
    pub ocr_noise: f64,
    pub decoding: Decoding,
    pub retriever: RetrieverKind,
    pub fixtures: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            grpo: GrpoConfig::default(),
            n_samples: 1000,
            templates: 2,
            init_scale: 0.01,
            sft_epochs: 3,
            sft_lr: 1e-2,
            sft_batch_size: 16,
            grpo_steps: 500,
            batch_size: 16,
            deadline_ms: misinfo_core::context::DEFAULT_DEADLINE_MS,
            ocr_noise: 0.0,
            decoding: Decoding::Greedy,
            retriever: RetrieverKind::None,
            fixtures: None,
            manifest: None,
            checkpoint: None,
            out: None,
            log: None,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value.parse().map_err(|_| CliError::Validation(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "n_samples",
        "p_clean",
        "noise_sigma",
        "canvas_width",
        "canvas_height",
        "box_min_extent",
        "box_max_extent",
        "bins",
        "boxes_per_sample",
        "templates",
        "init_scale",
        "sft_epochs",
        "sft_lr",
        "sft_batch_size",
        "grpo_steps",
        "batch_size",
        "group_size",
        "clip_epsilon",
        "kl_beta",
        "learning_rate",
        "std_floor",
        "old_policy_refresh",
        "kl_mode",
        "inner_epochs",
        "deadline_ms",
        "ocr_noise",
        "decoding",
        "retriever",
        "fixtures",
        "manifest",
        "checkpoint",
        "out",
        "log",
    ];

    /// Applies one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let g = &mut self.generator;
        match key {
            "seed" => g.seed = parse(key, value)?,
            "n_samples" => self.n_samples = parse(key, value)?,
            "p_clean" => g.p_clean = parse(key, value)?,
            "noise_sigma" => g.noise_sigma = parse(key, value)?,
            "canvas_width" => g.canvas_width = parse(key, value)?,
            "canvas_height" => g.canvas_height = parse(key, value)?,
            "box_min_extent" => g.box_min_extent = parse(key, value)?,
            "box_max_extent" => g.box_max_extent = parse(key, value)?,
            "bins" => g.bins = parse(key, value)?,
            "boxes_per_sample" => g.boxes_per_sample = parse(key, value)?,
            "templates" => self.templates = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "sft_epochs" => self.sft_epochs = parse(key, value)?,
            "sft_lr" => self.sft_lr = parse(key, value)?,
            "sft_batch_size" => self.sft_batch_size = parse(key, value)?,
            "grpo_steps" => self.grpo_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "group_size" => self.grpo.group_size = parse(key, value)?,
            "clip_epsilon" => self.grpo.clip_epsilon = parse(key, value)?,
            "kl_beta" => self.grpo.kl_beta = parse(key, value)?,
            "learning_rate" => self.grpo.learning_rate = parse(key, value)?,
            "std_floor" => self.grpo.std_floor = parse(key, value)?,
            "old_policy_refresh" => {
                self.grpo.old_policy_refresh = match value {
                    "every_step" => OldPolicyRefresh::EveryStep,
                    "every_epoch" => OldPolicyRefresh::EveryEpoch,
                    _ => return Err(CliError::Validation(format!("bad old_policy_refresh {value:?}"))),
                }
            }
            "kl_mode" => {
                self.grpo.kl_mode = match value {
                    "exact" => KlMode::ExactPerHead,
                    "k3" => KlMode::K3Estimator,
                    _ => return Err(CliError::Validation(format!("bad kl_mode {value:?} (exact|k3)"))),
                }
            }
            "inner_epochs" => self.grpo.inner_epochs = parse(key, value)?,
            "deadline_ms" => self.deadline_ms = parse(key, value)?,
            "ocr_noise" => self.ocr_noise = parse(key, value)?,
            "decoding" => self.decoding = value.parse().map_err(CliError::Validation)?,
            "retriever" => self.retriever = value.parse().map_err(CliError::Validation)?,
            "fixtures" => self.fixtures = Some(PathBuf::from(value)),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "log" => self.log = Some(PathBuf::from(value)),
            other => return Err(CliError::Validation(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses the key-value text into `key → value`, rejecting duplicates.
    pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("config line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Validation(format!("config line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(pairs)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut config = RunConfig::default();
        for (k, v) in Self::parse_pairs(text)? {
            config.set(&k, &v)?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.grpo.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        let bad = |m: &str| Err(CliError::Validation(m.to_string()));
        if self.templates < 2 {
            return bad("templates must be >= 2");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and >= 0");
        }
        if !(self.sft_lr >= 0.0 && self.sft_lr.is_finite()) {
            return bad("sft_lr must be finite and >= 0");
        }
        if self.sft_batch_size == 0 || self.batch_size == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.ocr_noise) {
            return bad("ocr_noise must be in [0, 1]");
        }
        if self.retriever == RetrieverKind::Fixture && self.fixtures.is_none() {
            return bad("retriever = fixture needs a fixtures path");
        }
        Ok(())
    }

    /// Canonical `key = value` listing of every setting.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let lines = [
            format!("seed = {}", g.seed),
            format!("n_samples = {}", self.n_samples),
            format!("p_clean = {}", g.p_clean),
            format!("noise_sigma = {}", g.noise_sigma),
            format!("canvas_width = {}", g.canvas_width),
            format!("canvas_height = {}", g.canvas_height),
            format!("box_min_extent = {}", g.box_min_extent),
            format!("box_max_extent = {}", g.box_max_extent),
            format!("bins = {}", g.bins),
            format!("boxes_per_sample = {}", g.boxes_per_sample),
            format!("templates = {}", self.templates),
            format!("init_scale = {}", self.init_scale),
            format!("sft_epochs = {}", self.sft_epochs),
            format!("sft_lr = {}", self.sft_lr),
            format!("sft_batch_size = {}", self.sft_batch_size),
            format!("grpo_steps = {}", self.grpo_steps),
            format!("batch_size = {}", self.batch_size),
            format!("group_size = {}", self.grpo.group_size),
            format!("clip_epsilon = {}", self.grpo.clip_epsilon),
            format!("kl_beta = {}", self.grpo.kl_beta),
            format!("learning_rate = {}", self.grpo.learning_rate),
            format!("std_floor = {}", self.grpo.std_floor),
            format!(
                "old_policy_refresh = {}",
                match self.grpo.old_policy_refresh {
                    OldPolicyRefresh::EveryStep => "every_step",
                    OldPolicyRefresh::EveryEpoch => "every_epoch",
                }
            ),
            format!(
                "kl_mode = {}",
                match self.grpo.kl_mode {
                    KlMode::ExactPerHead => "exact",
                    KlMode::K3Estimator => "k3",
                }
            ),
            format!("inner_epochs = {}", self.grpo.inner_epochs),
            format!("deadline_ms = {}", self.deadline_ms),
            format!("ocr_noise = {}", self.ocr_noise),
            format!(
                "decoding = {}",
                match self.decoding {
                    Decoding::Greedy => "greedy",
                    Decoding::Sample => "sample",
                }
            ),
            format!(
                "retriever = {}",
                match self.retriever {
                    RetrieverKind::None => "none",
                    RetrieverKind::Fixture => "fixture",
                    RetrieverKind::Timeout => "timeout",
                }
            ),
            format!("fixtures = {}", path(&self.fixtures)),
            format!("manifest = {}", path(&self.manifest)),
            format!("checkpoint = {}", path(&self.checkpoint)),
            format!("out = {}", path(&self.out)),
            format!("log = {}", path(&self.log)),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let c = RunConfig::from_text("# toy run\nseed = 7\n\nkl_mode = k3\nlearning_rate=0.1\nretriever = timeout\n")
            .unwrap();
        assert_eq!(c.generator.seed, 7);
        assert_eq!(c.grpo.kl_mode, KlMode::K3Estimator);
        assert_eq!(c.grpo.learning_rate, 0.1);
        assert_eq!(c.retriever, RetrieverKind::Timeout);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(RunConfig::from_text("sede = 1"), Err(CliError::Validation(_))));
        assert!(matches!(RunConfig::from_text("seed = 1\nseed = 2"), Err(CliError::Validation(_))));
        assert!(matches!(RunConfig::from_text("seed"), Err(CliError::Validation(_))));
        assert!(matches!(RunConfig::from_text("seed = x"), Err(CliError::Validation(_))));
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("manifest", "data/train.jsonl").unwrap();
        c.set("old_policy_refresh", "every_epoch").unwrap();
        let text = c.to_text();
        let pairs = RunConfig::parse_pairs(&text).unwrap();
        assert_eq!(pairs.len(), RunConfig::KEYS.len());
        let mut back = RunConfig::default();
        for (k, v) in pairs.iter().filter(|(_, v)| !v.is_empty()) {
            back.set(k, v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.set("group_size", "1").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("retriever", "fixture").unwrap();
        assert!(c.validate().is_err());
    }
}
