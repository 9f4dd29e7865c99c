use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Everything a training run needs besides the data. Label-space sizes are
/// filled in from the vocabulary at training time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Utterances longer than this are rejected.
    pub max_len: usize,
    /// Batches per length-sorted shuffling pool.
    pub pool_batches: usize,
    pub eval_batch_size: usize,
    /// Zero the refine tables and keep them frozen (the reduced model).
    pub zero_lrm_tables: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            max_epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            clip_norm: 5.0,
            seed: 1,
            max_len: 64,
            pool_batches: 50,
            eval_batch_size: 64,
            zero_lrm_tables: false,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "n_enc_layers" => m.n_enc_layers = parse(key, value)?,
            "n_dec_layers" => m.n_dec_layers = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "d_e" => m.d_e = parse(key, value)?,
            "lrm_after_layer" => m.lrm_after_layer = parse(key, value)?,
            "lrm_count" => m.lrm_count = parse(key, value)?,
            "use_lrm" => m.use_lrm = parse(key, value)?,
            "lrm_argmax" => m.lrm_argmax = parse(key, value)?,
            "separate_lrm_classifier" => m.separate_lrm_classifier = parse(key, value)?,
            "rel_clip" => m.rel_clip = parse(key, value)?,
            "alpha" => m.alpha = parse(key, value)?,
            "lambda" => m.lambda = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "pool_batches" => self.pool_batches = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "zero_lrm_tables" => self.zero_lrm_tables = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::InvalidValue {
            key: pair.to_string(),
            value: String::new(),
            reason: "expected key=value".into(),
        })?;
        self.set(key.trim(), value.trim())
    }

    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let mut c = TrainConfig::default();
        c.apply_text("# small setup\nd_model = 64\n\nalpha=0.2 # weight\nuse_lrm = false\nout_dir = /tmp/x\n").unwrap();
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.alpha, 0.2);
        assert!(!c.model.use_lrm);
        assert_eq!(c.out_dir, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::default().apply_text("d_modle = 3").unwrap_err();
        assert!(err.to_string().contains("d_modle"));
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
    }

    #[test]
    fn label_sizes_are_not_configurable() {
        assert!(matches!(TrainConfig::default().set("d_s", "5"), Err(ConfigError::UnknownKey { .. })));
    }

    #[test]
    fn bad_values_and_syntax() {
        assert!(matches!(TrainConfig::default().set("lr", "fast"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(TrainConfig::default().apply_text("x\n"), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "max_epochs = 3\nseed = 4\n").unwrap();
        let c = TrainConfig::load(Some(&path), &["seed=9".to_string()]).unwrap();
        assert_eq!((c.max_epochs, c.seed), (3, 9));
    }
}
