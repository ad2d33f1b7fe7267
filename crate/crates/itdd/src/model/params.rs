use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which model wiring to build.
///
/// `IteDd` is the full system: incremental encoder plus two-pass decoder.
/// `IteCkad` keeps the encoder but decodes in a single pass that attends to
/// both context and knowledge. `Kat` drops the incremental encoder and runs a
/// knowledge-attention transformer over the concatenated context window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ITE+DD")]
    IteDd,
    #[serde(rename = "ITE+CKAD")]
    IteCkad,
    #[serde(rename = "KAT")]
    Kat,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ITE+DD" => Ok(Self::IteDd),
            "ITE+CKAD" => Ok(Self::IteCkad),
            "KAT" => Ok(Self::Kat),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected ITE+DD, ITE+CKAD or KAT"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::IteDd => "ITE+DD",
            Self::IteCkad => "ITE+CKAD",
            Self::Kat => "KAT",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model shape and wiring configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Layers in each non-incremental sequence encoder stack.
    pub sa_layers: usize,
    /// Layers in the incremental utterance encoder (or the KAT encoder).
    pub ite_layers: usize,
    /// Layers in each decoder pass.
    pub dec_layers: usize,
    pub vocab_size: usize,
    /// How many recent turns form the dialogue context.
    pub window: usize,
    /// Maximum tokens kept per utterance (head of the sequence).
    pub utt_cap: usize,
    /// Maximum tokens kept per document (tail of the sequence).
    pub doc_cap: usize,
    /// Accepted for config compatibility; only 0.0 is supported.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be positive and even, got {}",
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.sa_layers == 0 || self.ite_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("all layer counts must be at least 1".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size must cover the 4 specials plus content, got {}",
                self.vocab_size
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.utt_cap == 0 || self.doc_cap == 0 {
            return Err(Error::Config("utt_cap and doc_cap must be positive".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config(format!(
                "dropout is not supported, set it to 0.0 (got {})",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Longest sequence the position table has to cover.
    pub fn max_positions(&self) -> usize {
        self.doc_cap
            .max(self.utt_cap * self.window)
            .max(512)
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Uniform(-0.08, 0.08).
    Weight,
    /// Zero.
    Bias,
    /// One.
    Gain,
}

const INIT_RANGE: f64 = 0.08;

fn attn_paths(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{w}"), vec![d, d], ParamKind::Weight));
    }
}

fn norm_paths(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d], ParamKind::Gain));
    out.push((format!("{prefix}.bias"), vec![d], ParamKind::Bias));
}

fn ffn_paths(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d: usize, f: usize) {
    out.push((format!("{prefix}.w1"), vec![d, f], ParamKind::Weight));
    out.push((format!("{prefix}.b1"), vec![f], ParamKind::Bias));
    out.push((format!("{prefix}.w2"), vec![f, d], ParamKind::Weight));
    out.push((format!("{prefix}.b2"), vec![d], ParamKind::Bias));
}

/// One attention sublayer plus its norm.
fn attn_sublayer(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, name: &str, d: usize) {
    attn_paths(out, &format!("{prefix}.{name}"), d);
    norm_paths(out, &format!("{prefix}.{name}_norm"), d);
}

fn ffn_sublayer(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d: usize, f: usize) {
    ffn_paths(out, &format!("{prefix}.ffn"), d, f);
    norm_paths(out, &format!("{prefix}.ffn_norm"), d);
}

/// Every parameter a variant owns: path, shape, init kind. Sorted by path.
/// This list is the single source of truth for init, binding and
/// checkpointing.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = Vec::new();
    out.push(("embed".to_string(), vec![v, d], ParamKind::Weight));
    out.push(("out.w".to_string(), vec![d, v], ParamKind::Weight));
    out.push(("out.b".to_string(), vec![v], ParamKind::Bias));

    // Document encoder, used by every variant.
    for i in 0..cfg.sa_layers {
        let p = format!("sa_s.l{i}");
        attn_sublayer(&mut out, &p, "attn", d);
        ffn_sublayer(&mut out, &p, d, f);
    }
    // Utterance encoder exists only where the deliberation decoder needs it.
    if cfg.variant == Variant::IteDd {
        for i in 0..cfg.sa_layers {
            let p = format!("sa_u.l{i}");
            attn_sublayer(&mut out, &p, "attn", d);
            ffn_sublayer(&mut out, &p, d, f);
        }
    }
    // Incremental (or KAT) encoder layers. KAT has no running context, so no
    // context sublayer is allocated for it.
    for i in 0..cfg.ite_layers {
        let p = format!("ite.l{i}");
        attn_sublayer(&mut out, &p, "self", d);
        attn_sublayer(&mut out, &p, "know", d);
        if cfg.variant != Variant::Kat {
            attn_sublayer(&mut out, &p, "ctx", d);
        }
        ffn_sublayer(&mut out, &p, d, f);
    }
    // Decoder stacks.
    for i in 0..cfg.dec_layers {
        let p = format!("dec1.l{i}");
        attn_sublayer(&mut out, &p, "self", d);
        match cfg.variant {
            Variant::IteDd => {
                attn_sublayer(&mut out, &p, "ctx", d);
                attn_sublayer(&mut out, &p, "utt", d);
            }
            Variant::IteCkad => {
                attn_sublayer(&mut out, &p, "ctx", d);
                attn_sublayer(&mut out, &p, "know", d);
            }
            Variant::Kat => {
                attn_sublayer(&mut out, &p, "src", d);
            }
        }
        ffn_sublayer(&mut out, &p, d, f);
    }
    if cfg.variant == Variant::IteDd {
        for i in 0..cfg.dec_layers {
            let p = format!("dec2.l{i}");
            attn_sublayer(&mut out, &p, "self", d);
            attn_sublayer(&mut out, &p, "know", d);
            attn_sublayer(&mut out, &p, "draft", d);
            ffn_sublayer(&mut out, &p, d, f);
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Path-keyed parameter store.
#[derive(Debug, Clone)]
pub struct Parameters {
    entries: BTreeMap<String, Tensor>,
}

impl Parameters {
    /// Deterministic initialization: paths are visited in sorted order and
    /// weights drawn from one seeded stream, so (config, seed) fixes every
    /// value.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        for (path, shape, kind) in param_specs(cfg) {
            let t = match kind {
                ParamKind::Weight => {
                    Tensor::rand_uniform(&mut rng, &shape, -INIT_RANGE, INIT_RANGE)
                }
                ParamKind::Bias => Tensor::zeros(&shape),
                ParamKind::Gain => Tensor::filled(&shape, 1.0),
            };
            entries.insert(path, t);
        }
        Ok(Self { entries })
    }

    pub fn from_entries(entries: BTreeMap<String, Tensor>) -> Self {
        Self { entries }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path:?}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Verifies that stored tensors match the config's expected shapes exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: stored {}, expected {}",
                self.entries.len(),
                specs.len()
            )));
        }
        for (path, shape, _) in &specs {
            let t = self.get(path)?;
            if t.shape() != &shape[..] {
                return Err(Error::Contract(format!(
                    "parameter {path:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}
