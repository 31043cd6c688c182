//! Training configuration and its flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::FilterSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Adversarial,
    WordVector,
    CnnOnly,
    Ensemble,
    Multitask,
    L2reg,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Adversarial,
        Mode::WordVector,
        Mode::CnnOnly,
        Mode::Ensemble,
        Mode::Multitask,
        Mode::L2reg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adversarial => "adversarial",
            Mode::WordVector => "word_vector",
            Mode::CnnOnly => "cnn_only",
            Mode::Ensemble => "ensemble",
            Mode::Multitask => "multitask",
            Mode::L2reg => "l2reg",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Weight of the adversarial term in the joint relation loss.
    pub lambda1: f64,
    /// Weight of the augmented classification term in the joint loss.
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub adversarial_epochs: usize,
    /// Top-k of the augmented encoder's pooling.
    pub k: usize,
    pub filters: FilterSpec,
    pub embed_dim: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub hidden_dim: usize,
    pub disc_width: usize,
    pub seed: u64,
    /// Keep the augmented encoder fixed after pretraining.
    pub freeze_augmented: bool,
    /// Start from fresh AdaGrad accumulators once `pretrain_epochs` are
    /// done. Baseline modes restart at the same epoch.
    pub restart_optimizer: bool,
    pub l2reg_weight: f64,
    pub multitask_weight: f64,
    /// Optional plain-text word vectors used to initialize embeddings.
    pub embeddings_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Adversarial,
            lambda1: 0.1,
            lambda2: 0.0,
            learning_rate: 0.001,
            batch_size: 32,
            pretrain_epochs: 8,
            adversarial_epochs: 12,
            k: 2,
            filters: FilterSpec::default(),
            embed_dim: 300,
            max_len: 80,
            min_count: 1,
            hidden_dim: 512,
            disc_width: 256,
            seed: 0,
            freeze_augmented: true,
            restart_optimizer: true,
            l2reg_weight: 0.1,
            multitask_weight: 0.5,
            embeddings_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad(format!(
                "lambda1 and lambda2 must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.disc_width == 0 {
            return bad("embed_dim, hidden_dim and disc_width must be positive".into());
        }
        if self.max_len < self.filters.max_width() {
            return bad(format!(
                "max_len {} is shorter than the widest filter {}",
                self.max_len,
                self.filters.max_width()
            ));
        }
        if !(self.l2reg_weight >= 0.0) || !(self.multitask_weight >= 0.0) {
            return bad("l2reg_weight and multitask_weight must be non-negative".into());
        }
        Ok(())
    }

    /// Parses a flat config file (`key = value` per line, `#` comments).
    /// Bare string values are accepted without quotes.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = parse_flat(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }

    pub fn to_config_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Reads a flat `key = value` file into any serde struct. Values that are
/// not valid TOML scalars are treated as strings.
pub fn parse_flat<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut normalized = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let literal = if is_toml_scalar(value) {
            value.to_string()
        } else {
            toml::Value::String(value.to_string()).to_string()
        };
        normalized.push_str(&format!("{key} = {literal}\n"));
    }
    toml::from_str(&normalized).map_err(|e| Error::Config(e.to_string()))
}

fn is_toml_scalar(v: &str) -> bool {
    format!("x = {v}").parse::<toml::Table>().is_ok()
}
