//! `key=value` experiment configuration with dotted keys.
//!
//! ```text
//! # comment
//! corpus.dim = 8
//! corpus.shift = 1.06,1.06,1.06,1.06,1.06,1.06,1.06,1.06
//! hp.lambda = 0.03
//! hp.feature_widths = 64,64,64
//! ```
//!
//! Unknown keys are rejected. Unset keys take the library defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{default_shift, CorpusSpec, Split};
use crate::error::{Error, Result};
use crate::model::{Architecture, HyperParams};
use crate::train::{Scenario, TrainConfig};

/// Every accepted key with its default rendered as text.
pub const KEYS: &[(&str, &str)] = &[
    ("corpus.dim", "8"),
    ("corpus.classes", "4"),
    ("corpus.utterances", "100"),
    ("corpus.frames_per_utterance", "25"),
    ("corpus.segment_frames", "5"),
    ("corpus.shift", "<3*noise_sigma spread evenly over all dims>"),
    ("corpus.rotation", "0.5235987755982988"),
    ("corpus.silence_fraction", "0.2"),
    ("corpus.noise_sigma", "1"),
    ("corpus.anchor_scale", "1.5"),
    ("corpus.seed", "7"),
    ("corpus.split", "train"),
    ("hp.lambda", "0.03"),
    ("hp.alpha", "0.3"),
    ("hp.batch_size", "32"),
    ("hp.seed", "1"),
    ("hp.epochs", "30"),
    ("hp.eq4_literal", "false"),
    ("hp.context", "-1,0,1"),
    ("hp.subsample", "3"),
    ("hp.feature_widths", "64,64,64"),
    ("hp.task_widths", ""),
    ("hp.domain_widths", "64,64"),
    ("hp.tap", "2"),
    ("train.scenario", "no_trans"),
    ("train.source", ""),
    ("train.target", ""),
    ("train.baseline", ""),
    ("train.log_every", "10"),
    ("compare.scenarios", "no_trans"),
    ("compare.probe", "false"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{} is not UTF-8 text", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse_list(v).map_err(|_| Error::Config(format!("{key}: cannot parse list {v:?}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        let d = CorpusSpec::default();
        let dim = self.get("corpus.dim", d.dim)?;
        let noise_sigma = self.get("corpus.noise_sigma", d.noise_sigma)?;
        let split = match self.raw("corpus.split") {
            None => d.split,
            Some(s) => Split::parse(s).ok_or_else(|| Error::Config(format!("corpus.split: unknown split {s:?}")))?,
        };
        let spec = CorpusSpec {
            dim,
            classes: self.get("corpus.classes", d.classes)?,
            utterances_per_domain: self.get("corpus.utterances", d.utterances_per_domain)?,
            frames_per_utterance: self.get("corpus.frames_per_utterance", d.frames_per_utterance)?,
            segment_frames: self.get("corpus.segment_frames", d.segment_frames)?,
            shift: self.list("corpus.shift", default_shift(dim, 3.0 * noise_sigma))?,
            rotation: self.get("corpus.rotation", d.rotation)?,
            silence_fraction: self.get("corpus.silence_fraction", d.silence_fraction)?,
            noise_sigma,
            anchor_scale: self.get("corpus.anchor_scale", d.anchor_scale)?,
            seed: self.get("corpus.seed", d.seed)?,
            split,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hyperparameters; input width and class count follow the corpus keys.
    pub fn hyper_params(&self) -> Result<HyperParams> {
        let d = HyperParams::default();
        let a = Architecture::default();
        let arch = Architecture {
            input_dim: self.get("corpus.dim", a.input_dim)?,
            context: self.list("hp.context", a.context)?,
            subsample: self.get("hp.subsample", a.subsample)?,
            feature_widths: self.list("hp.feature_widths", a.feature_widths)?,
            task_widths: self.list("hp.task_widths", a.task_widths)?,
            classes: self.get("corpus.classes", a.classes)?,
            domain_widths: self.list("hp.domain_widths", a.domain_widths)?,
            tap: self.get("hp.tap", a.tap)?,
        };
        let hp = HyperParams {
            lambda: self.get("hp.lambda", d.lambda)?,
            alpha: self.get("hp.alpha", d.alpha)?,
            batch_size: self.get("hp.batch_size", d.batch_size)?,
            seed: self.get("hp.seed", d.seed)?,
            epochs: self.get("hp.epochs", d.epochs)?,
            arch,
            eq4_literal: self.get("hp.eq4_literal", d.eq4_literal)?,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::parse(self.raw("train.scenario").unwrap_or("no_trans"))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let source_path = self
            .path("train.source")
            .ok_or_else(|| Error::Config("train.source is required".into()))?;
        let cfg = TrainConfig {
            hp: self.hyper_params()?,
            scenario: self.scenario()?,
            source_path,
            target_path: self.path("train.target"),
            baseline_path: self.path("train.baseline"),
            log_every: self.log_every()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn log_every(&self) -> Result<usize> {
        self.get("train.log_every", 10)
    }

    pub fn compare_scenarios(&self) -> Result<Vec<Scenario>> {
        self.raw("compare.scenarios")
            .unwrap_or("no_trans")
            .split(',')
            .map(|s| Scenario::parse(s.trim()))
            .collect()
    }

    pub fn compare_probe(&self) -> Result<bool> {
        self.get("compare.probe", false)
    }
}

/// Comma-separated list; the empty string is the empty list.
pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.corpus_spec().unwrap(), CorpusSpec::default());
        assert_eq!(cfg.hyper_params().unwrap(), HyperParams::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::parse("hp.lamda = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn parses_values_lists_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# a comment\n\nhp.lambda = -0.03\nhp.feature_widths=32, 32\nhp.tap=1\ncorpus.shift=1,0,0,0,0,0,0,0\n",
        )
        .unwrap();
        let hp = cfg.hyper_params().unwrap();
        assert_eq!(hp.lambda, -0.03);
        assert_eq!(hp.arch.feature_widths, vec![32, 32]);
        assert_eq!(cfg.corpus_spec().unwrap().shift[0], 1.0);
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = ExperimentConfig::parse("hp.epochs=3\n").unwrap();
        cfg.set_pair("hp.epochs=9").unwrap();
        assert_eq!(cfg.hyper_params().unwrap().epochs, 9);
        assert!(cfg.set_pair("nonsense").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let cfg = ExperimentConfig::parse("hp.alpha = fast\n").unwrap();
        assert!(cfg.hyper_params().unwrap_err().to_string().contains("hp.alpha"));
        assert!(ExperimentConfig::parse("just text\n").is_err());
    }

    #[test]
    fn asr_trans_needs_baseline() {
        let cfg = ExperimentConfig::parse("train.source=x.datf\ntrain.scenario=asr_trans\n").unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::Config(_))));
    }
}
