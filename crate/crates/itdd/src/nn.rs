//! Transformer building blocks: sinusoidal positions, embedding lookup,
//! masked multi-head attention, the position-wise feed-forward, and the
//! post-norm residual sublayer.
//!
//! These functions record onto a caller-provided [`Graph`]; parameters arrive
//! as already-bound [`Var`]s so the same code serves init, training and
//! decoding.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Additive score bias for masked positions. Large enough that after
/// max-subtraction the exponential underflows to exactly 0.0, which is what
/// makes causality checks bitwise rather than approximate.
pub const MASK_BIAS: f64 = -1e9;

/// Sinusoidal position table `[max_len x d_model]`.
///
/// Even columns carry `sin(pos / 10000^(2i/d))`, odd columns the matching
/// cosine. `d_model` must be even.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

/// Token embeddings plus positions: `table[ids] + pe[0..len]`.
pub fn embed_sequence(g: &mut Graph, table: Var, ids: &[u32], pe: &Tensor) -> Result<Var> {
    if ids.len() > pe.shape()[0] {
        return Err(Error::Contract(format!(
            "sequence of length {} exceeds position table of {}",
            ids.len(),
            pe.shape()[0]
        )));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let emb = g.embedding_gather(table, &idx)?;
    let d = pe.shape()[1];
    let pos = Tensor::new(
        vec![ids.len(), d],
        pe.data()[..ids.len() * d].to_vec(),
    )?;
    let pos = g.constant(pos);
    g.add(emb, pos)
}

/// Additive attention mask over a `[q_len x k_len]` score matrix.
///
/// Entries are either 0.0 (visible) or [`MASK_BIAS`] (blocked).
#[derive(Debug, Clone)]
pub struct AttnMask {
    bias: Tensor,
}

impl AttnMask {
    pub fn allow_all(q_len: usize, k_len: usize) -> Self {
        Self { bias: Tensor::zeros(&[q_len, k_len]) }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        let mut bias = Tensor::zeros(&[len, len]);
        for i in 0..len {
            for j in i + 1..len {
                bias.data_mut()[i * len + j] = MASK_BIAS;
            }
        }
        Self { bias }
    }

    /// Blocks keys whose `key_keep` entry is false, for every query.
    pub fn key_padding(q_len: usize, key_keep: &[bool]) -> Self {
        let k_len = key_keep.len();
        let mut bias = Tensor::zeros(&[q_len, k_len]);
        for i in 0..q_len {
            for (j, &keep) in key_keep.iter().enumerate() {
                if !keep {
                    bias.data_mut()[i * k_len + j] = MASK_BIAS;
                }
            }
        }
        Self { bias }
    }

    /// Intersection: a position is visible only if visible in both.
    pub fn and(&self, other: &AttnMask) -> Result<AttnMask> {
        if self.bias.shape() != other.bias.shape() {
            return Err(Error::Shape(format!(
                "mask shapes {:?} vs {:?}",
                self.bias.shape(),
                other.bias.shape()
            )));
        }
        let mut bias = self.bias.clone();
        for (b, o) in bias.data_mut().iter_mut().zip(other.bias.data()) {
            *b = b.min(*o);
        }
        Ok(AttnMask { bias })
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn q_len(&self) -> usize {
        self.bias.shape()[0]
    }

    pub fn k_len(&self) -> usize {
        self.bias.shape()[1]
    }

    fn fully_masked_row(&self) -> Option<usize> {
        let k = self.k_len();
        if k == 0 {
            return Some(0);
        }
        (0..self.q_len()).find(|&i| {
            self.bias.data()[i * k..(i + 1) * k]
                .iter()
                .all(|&b| b == MASK_BIAS)
        })
    }
}

/// Projection weights of one attention block. No biases anywhere in
/// attention.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Weights of one position-wise feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Scaled dot-product attention with `n_heads` heads over column slices.
///
/// `queries` is `[q_len x d]`, `keys` and `values` are `[k_len x d]`. Each
/// head attends with `softmax(Q_i K_i^T / sqrt(d/h) + mask)`, heads are
/// concatenated and projected by `wo`. A query row with no visible key has no
/// defined distribution, so that is rejected rather than normalized.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    weights: &AttnWeights,
    n_heads: usize,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let (tq, tk, tv) = (g.value(queries), g.value(keys), g.value(values));
    if tq.rank() != 2 || tk.rank() != 2 || tv.rank() != 2 {
        return Err(Error::Shape("attention inputs must be rank 2".into()));
    }
    let d = tq.shape()[1];
    if tk.shape()[1] != d || tv.shape()[1] != d || tk.shape()[0] != tv.shape()[0] {
        return Err(Error::Shape(format!(
            "attention shapes: queries {:?}, keys {:?}, values {:?}",
            tq.shape(),
            tk.shape(),
            tv.shape()
        )));
    }
    let (q_len, k_len) = (tq.shape()[0], tk.shape()[0]);
    if k_len == 0 {
        return Err(Error::Contract("attention over zero keys".into()));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!(
            "d_model {d} not divisible into {n_heads} heads"
        )));
    }
    if let Some(m) = mask {
        if m.q_len() != q_len || m.k_len() != k_len {
            return Err(Error::Shape(format!(
                "mask {:?} against scores [{q_len}, {k_len}]",
                m.bias.shape()
            )));
        }
        if let Some(row) = m.fully_masked_row() {
            return Err(Error::Contract(format!(
                "attention: query row {row} has no visible keys"
            )));
        }
    }
    let d_k = d / n_heads;
    let q = g.matmul(queries, weights.wq)?;
    let k = g.matmul(keys, weights.wk)?;
    let v = g.matmul(values, weights.wv)?;
    let mask_var = mask.map(|m| g.constant(m.bias.clone()));
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice(q, 1, h * d_k, (h + 1) * d_k)?;
        let kh = g.slice(k, 1, h * d_k, (h + 1) * d_k)?;
        let vh = g.slice(v, 1, h * d_k, (h + 1) * d_k)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
        let biased = match mask_var {
            Some(m) => g.add(scaled, m)?,
            None => scaled,
        };
        let attn = g.softmax(biased, 1)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(&heads, 1)?;
    g.matmul(merged, weights.wo)
}

/// `relu(x w1 + b1) w2 + b2`, applied to every row.
pub fn feed_forward(g: &mut Graph, x: Var, weights: &FfnWeights) -> Result<Var> {
    let h = g.matmul(x, weights.w1)?;
    let h = g.add_bias(h, weights.b1)?;
    let h = g.relu(h);
    let out = g.matmul(h, weights.w2)?;
    g.add_bias(out, weights.b2)
}

/// Post-norm residual: `layer_norm(x + inner(x))`.
///
/// The inner function must preserve shape; anything else is a wiring bug.
pub fn sublayer<F>(g: &mut Graph, x: Var, gain: Var, bias: Var, inner: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let fx = inner(g, x)?;
    if g.value(fx).shape() != g.value(x).shape() {
        return Err(Error::Contract(format!(
            "sublayer: inner output {:?} does not match input {:?}",
            g.value(fx).shape(),
            g.value(x).shape()
        )));
    }
    let sum = g.add(x, fx)?;
    g.layer_norm(sum, gain, bias)
}
