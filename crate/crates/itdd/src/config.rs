//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are skipped.
//! Every key has a desk-scale default, so an empty file is a valid config.
//! The vocabulary size is never a key: it comes from the corpus when the
//! vocabulary is built, which is why [`RunConfig::model_config`] takes it as
//! an argument.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

/// Everything a run needs besides the corpus and the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub sa_layers: usize,
    pub ite_layers: usize,
    pub dec_layers: usize,
    pub window: usize,
    pub utt_cap: usize,
    pub doc_cap: usize,
    pub dropout: f64,
    /// Vocabulary build: minimum token count and maximum table size.
    pub min_count: u64,
    pub max_vocab: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub seed: u64,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::IteDd,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            sa_layers: 2,
            ite_layers: 2,
            dec_layers: 2,
            window: 3,
            utt_cap: 50,
            doc_cap: 256,
            dropout: 0.0,
            min_count: 1,
            max_vocab: 10_000,
            batch_size: 8,
            max_steps: 500,
            lr: 1e-3,
            clip_norm: 1.0,
            eval_interval: 50,
            seed: 1,
            beam: 5,
            max_len: 30,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key:?} has unparseable value {value:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key {key:?} is set twice")));
            }
            match key {
                "variant" => cfg.variant = Variant::parse(value)?,
                "d_model" => cfg.d_model = num(key, value)?,
                "n_heads" => cfg.n_heads = num(key, value)?,
                "d_ff" => cfg.d_ff = num(key, value)?,
                "sa_layers" => cfg.sa_layers = num(key, value)?,
                "ite_layers" => cfg.ite_layers = num(key, value)?,
                "dec_layers" => cfg.dec_layers = num(key, value)?,
                "window" => cfg.window = num(key, value)?,
                "utt_cap" => cfg.utt_cap = num(key, value)?,
                "doc_cap" => cfg.doc_cap = num(key, value)?,
                "dropout" => cfg.dropout = num(key, value)?,
                "min_count" => cfg.min_count = num(key, value)?,
                "max_vocab" => cfg.max_vocab = num(key, value)?,
                "batch_size" => cfg.batch_size = num(key, value)?,
                "max_steps" => cfg.max_steps = num(key, value)?,
                "lr" => cfg.lr = num(key, value)?,
                "clip_norm" => cfg.clip_norm = num(key, value)?,
                "eval_interval" => cfg.eval_interval = num(key, value)?,
                "seed" => cfg.seed = num(key, value)?,
                "beam" => cfg.beam = num(key, value)?,
                "max_len" => cfg.max_len = num(key, value)?,
                other => {
                    return Err(Error::Config(format!("unknown config key {other:?}")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// The model shape for a vocabulary of `vocab_size` entries.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            sa_layers: self.sa_layers,
            ite_layers: self.ite_layers,
            dec_layers: self.dec_layers,
            vocab_size,
            window: self.window,
            utt_cap: self.utt_cap,
            doc_cap: self.doc_cap,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self, out_dir: PathBuf) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            lr: self.lr,
            clip_norm: self.clip_norm,
            eval_interval: self.eval_interval,
            seed: self.seed,
            out_dir,
        }
    }
}
