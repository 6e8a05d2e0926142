//! Flat `section.key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; later
//! assignments win, so `--set` overrides are applied after the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Everything a run needs: network shape plus training and loss settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: value.into(), msg: e.to_string() })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// Splits `key = value` lines, skipping blanks and comments.
pub fn entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `KEY=VALUE` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: s.into() })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ModelConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let full = format!("model.{key}");
        let k = full.as_str();
        match key {
            "shallow_channels" => self.shallow_channels = parse(k, value)?,
            "patch_size" => self.patch_size = parse(k, value)?,
            "embed_dim" => self.embed_dim = parse(k, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(k, value)?,
            "fusion_blocks" => self.fusion_blocks = parse(k, value)?,
            "refine_blocks" => self.refine_blocks = parse(k, value)?,
            "variant" => self.variant = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            _ => return Err(ConfigError::UnknownKey(full)),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.shallow_channels = {}", self.shallow_channels);
        let _ = writeln!(s, "model.patch_size = {}", self.patch_size);
        let _ = writeln!(s, "model.embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "model.mlp_hidden = {}", self.mlp_hidden);
        let _ = writeln!(s, "model.fusion_blocks = {}", self.fusion_blocks);
        let _ = writeln!(s, "model.refine_blocks = {}", self.refine_blocks);
        let _ = writeln!(s, "model.variant = {}", self.variant);
        let _ = writeln!(s, "model.seed = {}", self.seed);
        s
    }

    /// Parses `model.*` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in entries(text)? {
            let key = k.strip_prefix("model.").ok_or_else(|| ConfigError::UnknownKey(k.clone()))?;
            cfg.apply(key, &v)?;
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let full = format!("train.{key}");
        let k = full.as_str();
        match key {
            "epochs" => self.epochs = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "initial_lr" => self.initial_lr = parse(k, value)?,
            "lr_halving_epochs" => self.lr_halving_epochs = parse_list(k, value)?,
            "patch_size" => self.patch_size = parse(k, value)?,
            "patches_per_epoch" => self.patches_per_epoch = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, value)?,
            "grad_clip" => self.grad_clip = parse(k, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse(k, value)?,
            "beta1" => self.optimizer.beta1 = parse(k, value)?,
            "beta2" => self.optimizer.beta2 = parse(k, value)?,
            "eps" => self.optimizer.eps = parse(k, value)?,
            _ => return Err(ConfigError::UnknownKey(full)),
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split_once('.') {
            Some(("model", rest)) => self.model.apply(rest, value),
            Some(("train", rest)) => self.train.apply(rest, value),
            Some(("loss", "alpha")) => {
                self.train.loss.alpha = parse(key, value)?;
                Ok(())
            }
            Some(("loss", "gamma")) => {
                self.train.loss.gamma = parse(key, value)?;
                Ok(())
            }
            _ => Err(ConfigError::UnknownKey(key.into())),
        }
    }

    /// Applies every line of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in entries(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        if !self.train.patch_size.is_multiple_of(self.model.patch_size) {
            return Err(ConfigError::Invalid(format!(
                "train.patch_size {} is not a multiple of model.patch_size {}",
                self.train.patch_size, self.model.patch_size
            )));
        }
        Ok(())
    }

    /// Serializes every key; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = self.model.to_text();
        let _ = writeln!(s, "loss.alpha = {}", t.loss.alpha);
        let _ = writeln!(s, "loss.gamma = {}", t.loss.gamma);
        let halving: Vec<String> = t.lr_halving_epochs.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.initial_lr = {}", t.initial_lr);
        let _ = writeln!(s, "train.lr_halving_epochs = {}", halving.join(","));
        let _ = writeln!(s, "train.patch_size = {}", t.patch_size);
        let _ = writeln!(s, "train.patches_per_epoch = {}", t.patches_per_epoch);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "train.grad_clip = {}", t.grad_clip);
        let _ = writeln!(s, "train.weight_decay = {}", t.optimizer.weight_decay);
        let _ = writeln!(s, "train.beta1 = {}", t.optimizer.beta1);
        let _ = writeln!(s, "train.beta2 = {}", t.optimizer.beta2);
        let _ = writeln!(s, "train.eps = {}", t.optimizer.eps);
        s
    }
}
