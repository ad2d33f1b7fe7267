use std::collections::BTreeMap;

use super::params::{ModelConfig, Parameters, Variant};
use crate::data::{keep_mask, EncTurn, TrainingExample, BOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{self, AttnMask, AttnWeights, FfnWeights};
use crate::tensor::{Graph, Mark, Tensor, Var};

/// A sequence encoding living on the forward graph: `[len x d_model]` plus
/// which positions are real tokens.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub var: Var,
    pub keep: Vec<bool>,
}

/// The incremental context state c^(k): the representation of the most
/// recently encoded utterance, which already attended to everything before
/// it. c^(0) is the empty state.
#[derive(Debug, Clone)]
pub struct ContextState {
    repr: Option<Encoded>,
}

impl ContextState {
    pub fn empty() -> Self {
        Self { repr: None }
    }

    pub fn is_empty(&self) -> bool {
        self.repr.is_none()
    }

    pub fn encoded(&self) -> Option<&Encoded> {
        self.repr.as_ref()
    }
}

/// Which self-attentive encoder stack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaStack {
    Document,
    Utterance,
}

impl SaStack {
    fn prefix(self) -> &'static str {
        match self {
            Self::Document => "sa_s",
            Self::Utterance => "sa_u",
        }
    }
}

/// Everything one training example produces in a single forward build.
#[derive(Debug)]
pub struct ExampleForward {
    /// First-pass (or only) logits, `[T x V]`.
    pub logits1: Var,
    /// Second-pass logits for the deliberation variant.
    pub logits2: Option<Var>,
    /// Detached first-pass argmax tokens that fed the second pass.
    pub draft: Option<Vec<u32>>,
}

/// One forward build: a graph, the parameters bound into it on first use,
/// and the position table. Create one per example during training; decoding
/// reuses one across beam steps via mark/rewind.
pub struct Forward<'p> {
    pub g: Graph,
    cfg: &'p ModelConfig,
    params: &'p Parameters,
    pe: Tensor,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'p> Forward<'p> {
    pub fn new(cfg: &'p ModelConfig, params: &'p Parameters, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        params.check_against(cfg)?;
        let pe = nn::positional_encoding(cfg.max_positions(), cfg.d_model)?;
        Ok(Self {
            g: Graph::new(),
            cfg,
            params,
            pe,
            trainable,
            bound: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Parameter var, bound into the graph on first use.
    fn p(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let t = self.params.get(path)?.clone();
        let v = self.g.leaf(t, self.trainable);
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    fn attn_weights(&mut self, prefix: &str) -> Result<AttnWeights> {
        Ok(AttnWeights {
            wq: self.p(&format!("{prefix}.wq"))?,
            wk: self.p(&format!("{prefix}.wk"))?,
            wv: self.p(&format!("{prefix}.wv"))?,
            wo: self.p(&format!("{prefix}.wo"))?,
        })
    }

    fn norm_pair(&mut self, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.p(&format!("{prefix}.gain"))?,
            self.p(&format!("{prefix}.bias"))?,
        ))
    }

    fn ffn_weights(&mut self, prefix: &str) -> Result<FfnWeights> {
        Ok(FfnWeights {
            w1: self.p(&format!("{prefix}.w1"))?,
            b1: self.p(&format!("{prefix}.b1"))?,
            w2: self.p(&format!("{prefix}.w2"))?,
            b2: self.p(&format!("{prefix}.b2"))?,
        })
    }

    /// Attention sublayer `prefix` with keys/values `kv`, post-norm residual.
    fn attn_sub(&mut self, x: Var, prefix: &str, kv: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let w = self.attn_weights(prefix)?;
        let (gain, bias) = self.norm_pair(&format!("{prefix}_norm"))?;
        let heads = self.cfg.n_heads;
        nn::sublayer(&mut self.g, x, gain, bias, |g, x| {
            nn::multi_head_attention(g, x, kv, kv, &w, heads, mask)
        })
    }

    fn ffn_sub(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.ffn_weights(&format!("{prefix}.ffn"))?;
        let (gain, bias) = self.norm_pair(&format!("{prefix}.ffn_norm"))?;
        nn::sublayer(&mut self.g, x, gain, bias, |g, x| nn::feed_forward(g, x, &w))
    }

    fn embed(&mut self, ids: &[u32]) -> Result<Var> {
        let table = self.p("embed")?;
        nn::embed_sequence(&mut self.g, table, ids, &self.pe)
    }

    /// Self-attentive encoder: embeddings with positions through `sa_layers`
    /// of [self-attention, FFN] sublayers.
    pub fn sa_encode(&mut self, stack: SaStack, tokens: &[u32]) -> Result<Encoded> {
        if tokens.is_empty() {
            return Err(Error::Contract("sa_encode: empty token sequence".into()));
        }
        let mut keep = keep_mask(tokens);
        if !keep.iter().any(|&k| k) {
            // A draft can legitimately be all PAD; attend it unmasked rather
            // than leave the queries without keys.
            keep = vec![true; tokens.len()];
        }
        let prefix = stack.prefix();
        let mask = AttnMask::key_padding(tokens.len(), &keep);
        let mut x = self.embed(tokens)?;
        for l in 0..self.cfg.sa_layers {
            x = self.attn_sub(x, &format!("{prefix}.l{l}.attn"), x, Some(&mask))?;
            x = self.ffn_sub(x, &format!("{prefix}.l{l}"))?;
        }
        Ok(Encoded { var: x, keep })
    }

    /// One incremental encoding step: the new utterance attends itself, the
    /// document encoding, and the previous context state. With an empty
    /// previous state the context sublayer is bypassed entirely, which is
    /// exactly the KAT encoder layer.
    pub fn encode_incremental(
        &mut self,
        prev: &ContextState,
        doc: &Encoded,
        tokens: &[u32],
    ) -> Result<ContextState> {
        if tokens.is_empty() {
            return Err(Error::Contract("encode_incremental: empty utterance".into()));
        }
        let keep = keep_mask(tokens);
        let len = tokens.len();
        let self_mask = AttnMask::key_padding(len, &keep);
        let doc_mask = AttnMask::key_padding(len, &doc.keep);
        let ctx_mask = prev
            .encoded()
            .map(|c| AttnMask::key_padding(len, &c.keep));
        let mut x = self.embed(tokens)?;
        for l in 0..self.cfg.ite_layers {
            x = self.attn_sub(x, &format!("ite.l{l}.self"), x, Some(&self_mask))?;
            x = self.attn_sub(x, &format!("ite.l{l}.know"), doc.var, Some(&doc_mask))?;
            if let Some(c) = prev.encoded() {
                let mask = ctx_mask.as_ref().expect("mask built with state");
                x = self.attn_sub(x, &format!("ite.l{l}.ctx"), c.var, Some(mask))?;
            }
            x = self.ffn_sub(x, &format!("ite.l{l}"))?;
        }
        Ok(ContextState { repr: Some(Encoded { var: x, keep }) })
    }

    /// Folds `encode_incremental` over the turns, encoding each turn's
    /// document first. Callers pass at most the configured window of turns.
    pub fn encode_dialogue(&mut self, turns: &[EncTurn]) -> Result<ContextState> {
        let mut state = ContextState::empty();
        for turn in turns {
            let doc = self.sa_encode(SaStack::Document, &turn.doc)?;
            state = self.encode_incremental(&state, &doc, &turn.tokens)?;
        }
        Ok(state)
    }

    /// Causal decoder stack `stack` over `prefix`, with the given cross
    /// attention sublayers applied in order after self-attention, then the
    /// vocabulary projection. Prefix must start with BOS.
    fn decoder_stack(
        &mut self,
        stack: &str,
        prefix: &[u32],
        crosses: &[(&str, &Encoded)],
    ) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::Contract("decoder: empty prefix".into()));
        }
        if prefix[0] != BOS {
            return Err(Error::Contract(format!(
                "decoder: prefix must begin with BOS, got id {}",
                prefix[0]
            )));
        }
        let len = prefix.len();
        let keep = keep_mask(prefix);
        let self_mask = AttnMask::causal(len).and(&AttnMask::key_padding(len, &keep))?;
        let cross_masks: Vec<AttnMask> = crosses
            .iter()
            .map(|(_, enc)| AttnMask::key_padding(len, &enc.keep))
            .collect();
        let mut x = self.embed(prefix)?;
        for l in 0..self.cfg.dec_layers {
            x = self.attn_sub(x, &format!("{stack}.l{l}.self"), x, Some(&self_mask))?;
            for ((name, enc), mask) in crosses.iter().zip(&cross_masks) {
                x = self.attn_sub(x, &format!("{stack}.l{l}.{name}"), enc.var, Some(mask))?;
            }
            x = self.ffn_sub(x, &format!("{stack}.l{l}"))?;
        }
        let w = self.p("out.w")?;
        let b = self.p("out.b")?;
        let logits = self.g.matmul(x, w)?;
        self.g.add_bias(logits, b)
    }

    /// First deliberation pass: causal self-attention, context attention
    /// over c^(k), utterance attention over SA_u(u^(k)), FFN.
    pub fn decode_first_pass(
        &mut self,
        prefix: &[u32],
        ctx: &ContextState,
        utt: &Encoded,
    ) -> Result<Var> {
        let c = ctx.encoded().ok_or_else(|| {
            Error::Contract("first pass needs a non-empty context state".into())
        })?;
        self.decoder_stack("dec1", prefix, &[("ctx", c), ("utt", utt)])
    }

    /// Second deliberation pass: knowledge attention over d^(k+1) and draft
    /// attention over SA_u(first-pass tokens). Never sees the context state.
    pub fn decode_second_pass(
        &mut self,
        prefix: &[u32],
        draft: &Encoded,
        doc_next: &Encoded,
    ) -> Result<Var> {
        self.decoder_stack("dec2", prefix, &[("know", doc_next), ("draft", draft)])
    }

    /// Single-pass decoder attending context and knowledge.
    pub fn decode_ckad(
        &mut self,
        prefix: &[u32],
        ctx: &ContextState,
        doc_next: &Encoded,
    ) -> Result<Var> {
        let c = ctx.encoded().ok_or_else(|| {
            Error::Contract("context-knowledge decoding needs a non-empty context state".into())
        })?;
        self.decoder_stack("dec1", prefix, &[("ctx", c), ("know", doc_next)])
    }

    /// Single-pass decoder attending the concatenated-context encoding.
    pub fn decode_kat(&mut self, prefix: &[u32], src: &Encoded) -> Result<Var> {
        self.decoder_stack("dec1", prefix, &[("src", src)])
    }

    /// The turns' tokens flattened into one sequence, keeping the most
    /// recent `utt_cap * window` tokens.
    pub fn kat_input(&self, turns: &[EncTurn]) -> Vec<u32> {
        let mut flat: Vec<u32> = turns.iter().flat_map(|t| t.tokens.iter().copied()).collect();
        let cap = self.cfg.utt_cap * self.cfg.window;
        if flat.len() > cap {
            flat.drain(..flat.len() - cap);
        }
        flat
    }

    /// Encoder for the KAT variant: incremental layers with no context
    /// sublayer, over the flattened turn window.
    pub fn kat_encode(&mut self, turns: &[EncTurn], doc_next: &Encoded) -> Result<Encoded> {
        let flat = self.kat_input(turns);
        let state = self.encode_incremental(&ContextState::empty(), doc_next, &flat)?;
        Ok(state.encoded().expect("nonempty input yields a state").clone())
    }

    /// Builds the whole teacher-forced forward pass for one example under
    /// the configured variant.
    pub fn forward_example(&mut self, ex: &TrainingExample) -> Result<ExampleForward> {
        if ex.context.is_empty() {
            return Err(Error::Contract("example has no context turns".into()));
        }
        if ex.target.len() < 2 {
            return Err(Error::Contract("example target must hold BOS and EOS".into()));
        }
        let input = ex.decoder_input().to_vec();
        match self.cfg.variant {
            Variant::IteDd => {
                let ctx = self.encode_dialogue(&ex.context)?;
                let last = ex.context.last().expect("nonempty context");
                let utt = self.sa_encode(SaStack::Utterance, &last.tokens)?;
                let logits1 = self.decode_first_pass(&input, &ctx, &utt)?;
                // The draft is read out of the graph as plain token ids: the
                // second pass must not backpropagate through the first.
                let mut draft = argmax_rows(self.g.value(logits1));
                for (d, &gold) in draft.iter_mut().zip(ex.gold()) {
                    // Positions that are batch filler carry no draft token.
                    if gold == PAD {
                        *d = PAD;
                    }
                }
                let draft_enc = self.sa_encode(SaStack::Utterance, &draft)?;
                let doc_next = self.sa_encode(SaStack::Document, &ex.response_doc)?;
                let logits2 = self.decode_second_pass(&input, &draft_enc, &doc_next)?;
                Ok(ExampleForward {
                    logits1,
                    logits2: Some(logits2),
                    draft: Some(draft),
                })
            }
            Variant::IteCkad => {
                let ctx = self.encode_dialogue(&ex.context)?;
                let doc_next = self.sa_encode(SaStack::Document, &ex.response_doc)?;
                let logits1 = self.decode_ckad(&input, &ctx, &doc_next)?;
                Ok(ExampleForward { logits1, logits2: None, draft: None })
            }
            Variant::Kat => {
                let doc_next = self.sa_encode(SaStack::Document, &ex.response_doc)?;
                let src = self.kat_encode(&ex.context, &doc_next)?;
                let logits1 = self.decode_kat(&input, &src)?;
                Ok(ExampleForward { logits1, logits2: None, draft: None })
            }
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.g.backward(loss)
    }

    /// Gradients accumulated on bound parameters by the last backward.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(path, &v)| self.g.grad(v).map(|t| (path.clone(), t)))
            .collect()
    }

    pub fn mark(&self) -> Mark {
        self.g.mark()
    }

    /// Rewind the tape and forget bindings that fell off it.
    pub fn rewind(&mut self, mark: Mark) {
        self.g.rewind(mark);
        let g = &self.g;
        self.bound.retain(|_, v| g.is_live(*v));
    }
}

/// Per-row argmax; ties go to the smallest column.
pub fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut best = 0usize;
        for j in 1..cols {
            if logits.at(i, j) > logits.at(i, best) {
                best = j;
            }
        }
        out.push(best as u32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EncTurn, TrainingExample, BOS, EOS};
    use crate::nn::{feed_forward, multi_head_attention, sublayer};

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            sa_layers: 1,
            ite_layers: 1,
            dec_layers: 1,
            vocab_size: 12,
            window: 3,
            utt_cap: 10,
            doc_cap: 16,
            dropout: 0.0,
        }
    }

    fn example() -> TrainingExample {
        TrainingExample {
            context: vec![
                EncTurn { tokens: vec![4, 5, 6], doc: vec![7, 8] },
                EncTurn { tokens: vec![9, 4], doc: vec![7, 8, 10] },
            ],
            response_doc: vec![10, 11, 7],
            target: vec![BOS, 5, 9, 11, EOS],
        }
    }

    fn nll(f: &mut Forward, logits: Var, gold: &[u32]) -> Var {
        let lp = f.g.log_softmax(logits, 1).unwrap();
        let cols: Vec<usize> = gold.iter().map(|&t| t as usize).collect();
        let picked = f.g.pick_per_row(lp, &cols).unwrap();
        let s = f.g.reduce_sum(picked);
        f.g.scale(s, -1.0)
    }

    #[test]
    fn sa_stacks_have_disjoint_parameters() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 1).unwrap();
        let mut f = Forward::new(&c, &p, false).unwrap();
        let a = f.sa_encode(SaStack::Document, &[4, 5, 6]).unwrap();
        let b = f.sa_encode(SaStack::Utterance, &[4, 5, 6]).unwrap();
        let gap = f.g.value(a.var).linf_distance(f.g.value(b.var));
        assert!(gap > 0.0);
        assert_eq!(f.g.value(a.var).shape(), &[3, 8]);
    }

    #[test]
    fn sa_encode_matches_composition_from_primitives() {
        let mut c = cfg(Variant::IteCkad);
        c.n_heads = 1;
        let p = Parameters::init(&c, 2).unwrap();
        let tokens = [4u32, 7, 5];

        let mut f = Forward::new(&c, &p, false).unwrap();
        let got = f.sa_encode(SaStack::Document, &tokens).unwrap();

        // The same single layer rebuilt step by step from nn primitives.
        let mut g = Graph::new();
        let pe = nn::positional_encoding(c.max_positions(), c.d_model).unwrap();
        let table = g.leaf(p.get("embed").unwrap().clone(), false);
        let x = nn::embed_sequence(&mut g, table, &tokens, &pe).unwrap();
        let w = AttnWeights {
            wq: g.leaf(p.get("sa_s.l0.attn.wq").unwrap().clone(), false),
            wk: g.leaf(p.get("sa_s.l0.attn.wk").unwrap().clone(), false),
            wv: g.leaf(p.get("sa_s.l0.attn.wv").unwrap().clone(), false),
            wo: g.leaf(p.get("sa_s.l0.attn.wo").unwrap().clone(), false),
        };
        let gain = g.leaf(p.get("sa_s.l0.attn_norm.gain").unwrap().clone(), false);
        let bias = g.leaf(p.get("sa_s.l0.attn_norm.bias").unwrap().clone(), false);
        let mask = AttnMask::key_padding(3, &[true, true, true]);
        let x = sublayer(&mut g, x, gain, bias, |g, x| {
            multi_head_attention(g, x, x, x, &w, 1, Some(&mask))
        })
        .unwrap();
        let fw = FfnWeights {
            w1: g.leaf(p.get("sa_s.l0.ffn.w1").unwrap().clone(), false),
            b1: g.leaf(p.get("sa_s.l0.ffn.b1").unwrap().clone(), false),
            w2: g.leaf(p.get("sa_s.l0.ffn.w2").unwrap().clone(), false),
            b2: g.leaf(p.get("sa_s.l0.ffn.b2").unwrap().clone(), false),
        };
        let gain = g.leaf(p.get("sa_s.l0.ffn_norm.gain").unwrap().clone(), false);
        let bias = g.leaf(p.get("sa_s.l0.ffn_norm.bias").unwrap().clone(), false);
        let want = sublayer(&mut g, x, gain, bias, |g, x| feed_forward(g, x, &fw)).unwrap();

        assert!(f.g.value(got.var).bit_eq(g.value(want)));
    }

    #[test]
    fn empty_context_encoding_bypasses_the_context_sublayer() {
        // Shared weights, one path through encode_incremental with the empty
        // state, one through a hand-built layer with no context sublayer.
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 3).unwrap();
        let tokens = [5u32, 9];

        let mut f = Forward::new(&c, &p, false).unwrap();
        let doc = f.sa_encode(SaStack::Document, &[7, 8]).unwrap();
        let got = f
            .encode_incremental(&ContextState::empty(), &doc, &tokens)
            .unwrap();

        let mut f2 = Forward::new(&c, &p, false).unwrap();
        let doc2 = f2.sa_encode(SaStack::Document, &[7, 8]).unwrap();
        let keep = vec![true; 2];
        let self_mask = AttnMask::key_padding(2, &keep);
        let doc_mask = AttnMask::key_padding(2, &doc2.keep);
        let mut x = f2.embed(&tokens).unwrap();
        x = f2.attn_sub(x, "ite.l0.self", x, Some(&self_mask)).unwrap();
        x = f2.attn_sub(x, "ite.l0.know", doc2.var, Some(&doc_mask)).unwrap();
        x = f2.ffn_sub(x, "ite.l0").unwrap();

        assert!(f
            .g
            .value(got.encoded().unwrap().var)
            .bit_eq(f2.g.value(x)));
    }

    #[test]
    fn previous_context_changes_the_encoding() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 4).unwrap();
        let mut f = Forward::new(&c, &p, false).unwrap();
        let doc = f.sa_encode(SaStack::Document, &[7, 8]).unwrap();
        let empty = f
            .encode_incremental(&ContextState::empty(), &doc, &[5, 9])
            .unwrap();
        let prev = f.encode_incremental(&ContextState::empty(), &doc, &[4]).unwrap();
        let with_ctx = f.encode_incremental(&prev, &doc, &[5, 9]).unwrap();
        let gap = f
            .g
            .value(empty.encoded().unwrap().var)
            .linf_distance(f.g.value(with_ctx.encoded().unwrap().var));
        assert!(gap > 0.0);
    }

    #[test]
    fn dialogue_state_has_prefix_property() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 5).unwrap();
        let turns = example().context;

        let mut f1 = Forward::new(&c, &p, false).unwrap();
        let after_two = f1.encode_dialogue(&turns).unwrap();

        let mut longer = turns.clone();
        longer.push(EncTurn { tokens: vec![11, 11, 4], doc: vec![6] });
        let mut f2 = Forward::new(&c, &p, false).unwrap();
        let doc1 = f2.sa_encode(SaStack::Document, &turns[0].doc).unwrap();
        let s1 = f2
            .encode_incremental(&ContextState::empty(), &doc1, &turns[0].tokens)
            .unwrap();
        let doc2 = f2.sa_encode(SaStack::Document, &turns[1].doc).unwrap();
        let s2 = f2.encode_incremental(&s1, &doc2, &turns[1].tokens).unwrap();
        let doc3 = f2.sa_encode(SaStack::Document, &longer[2].doc).unwrap();
        let _s3 = f2.encode_incremental(&s2, &doc3, &longer[2].tokens).unwrap();

        // State after turn 2 is identical whether or not turn 3 follows.
        assert!(f1
            .g
            .value(after_two.encoded().unwrap().var)
            .bit_eq(f2.g.value(s2.encoded().unwrap().var)));
    }

    #[test]
    fn decoder_is_bitwise_causal() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 6).unwrap();
        let ex = example();
        let mut f = Forward::new(&c, &p, false).unwrap();
        let ctx = f.encode_dialogue(&ex.context).unwrap();
        let utt = f
            .sa_encode(SaStack::Utterance, &ex.context.last().unwrap().tokens)
            .unwrap();
        let short = f.decode_first_pass(&[BOS, 5, 9], &ctx, &utt).unwrap();
        let long = f.decode_first_pass(&[BOS, 5, 9, 11, 4], &ctx, &utt).unwrap();
        let (vs, vl) = (f.g.value(short).clone(), f.g.value(long).clone());
        let v = c.vocab_size;
        for i in 0..3 {
            for j in 0..v {
                assert_eq!(vs.at(i, j).to_bits(), vl.at(i, j).to_bits(), "row {i}");
            }
        }
    }

    #[test]
    fn decoder_distributions_are_normalized() {
        let c = cfg(Variant::IteCkad);
        let p = Parameters::init(&c, 7).unwrap();
        let ex = example();
        let mut f = Forward::new(&c, &p, false).unwrap();
        let out = f.forward_example(&ex).unwrap();
        let probs = f.g.softmax(out.logits1, 1).unwrap();
        let t = f.g.value(probs);
        for i in 0..t.rows() {
            let sum: f64 = (0..t.cols()).map(|j| t.at(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_rejects_bad_prefixes() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 8).unwrap();
        let ex = example();
        let mut f = Forward::new(&c, &p, false).unwrap();
        let ctx = f.encode_dialogue(&ex.context).unwrap();
        let utt = f.sa_encode(SaStack::Utterance, &[4]).unwrap();
        assert!(f.decode_first_pass(&[], &ctx, &utt).is_err());
        assert!(f.decode_first_pass(&[5, 9], &ctx, &utt).is_err());
        assert!(f
            .decode_first_pass(&[BOS, 5], &ContextState::empty(), &utt)
            .is_err());
    }

    #[test]
    fn variants_emit_identical_logit_shapes() {
        let ex = example();
        let want = [ex.decoder_input().len(), 12];
        for variant in [Variant::IteDd, Variant::IteCkad, Variant::Kat] {
            let c = cfg(variant);
            let p = Parameters::init(&c, 9).unwrap();
            let mut f = Forward::new(&c, &p, false).unwrap();
            let out = f.forward_example(&ex).unwrap();
            assert_eq!(f.g.value(out.logits1).shape(), &want, "variant {variant}");
            if let Some(l2) = out.logits2 {
                assert_eq!(f.g.value(l2).shape(), &want);
            }
        }
    }

    #[test]
    fn second_pass_loss_reaches_no_first_pass_parameters() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 10).unwrap();
        let ex = example();
        let mut f = Forward::new(&c, &p, true).unwrap();
        let out = f.forward_example(&ex).unwrap();
        let l2 = nll(&mut f, out.logits2.unwrap(), ex.gold());
        f.backward(l2).unwrap();
        let grads = f.grads();
        assert!(!grads.is_empty());
        for path in grads.keys() {
            assert!(
                !path.starts_with("dec1.") && !path.starts_with("ite."),
                "gradient leaked into {path}"
            );
        }
        assert!(grads.keys().any(|p| p.starts_with("dec2.")));
        assert!(grads.keys().any(|p| p.starts_with("sa_u.")));
        assert!(grads.keys().any(|p| p.starts_with("sa_s.")));
    }

    #[test]
    fn every_parameter_is_reachable_from_the_combined_loss() {
        for variant in [Variant::IteDd, Variant::IteCkad, Variant::Kat] {
            let c = cfg(variant);
            let p = Parameters::init(&c, 11).unwrap();
            let ex = example();
            let mut f = Forward::new(&c, &p, true).unwrap();
            let out = f.forward_example(&ex).unwrap();
            let loss = match out.logits2 {
                Some(l2) => {
                    let l1 = nll(&mut f, out.logits1, ex.gold());
                    let l2 = nll(&mut f, l2, ex.gold());
                    f.g.add(l1, l2).unwrap()
                }
                None => nll(&mut f, out.logits1, ex.gold()),
            };
            f.backward(loss).unwrap();
            let grads = f.grads();
            for (path, _, _) in super::super::params::param_specs(&c) {
                let g = grads.get(&path).unwrap_or_else(|| {
                    panic!("variant {variant}: no gradient on {path}")
                });
                assert!(g.is_finite(), "variant {variant}: {path} has non-finite grad");
                assert!(
                    g.data().iter().any(|&x| x != 0.0),
                    "variant {variant}: {path} gradient identically zero"
                );
            }
        }
    }

    #[test]
    fn second_pass_ignores_the_context_state() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 12).unwrap();
        let prefix = [BOS, 5, 9];
        let draft_tokens = [9u32, 11];
        let doc_tokens = [10u32, 11, 7];

        let run = |context: &[EncTurn]| -> Tensor {
            let mut f = Forward::new(&c, &p, false).unwrap();
            // Encode a context, as training would, then decode pass 2.
            let _ctx = f.encode_dialogue(context).unwrap();
            let draft = f.sa_encode(SaStack::Utterance, &draft_tokens).unwrap();
            let doc = f.sa_encode(SaStack::Document, &doc_tokens).unwrap();
            let l2 = f.decode_second_pass(&prefix, &draft, &doc).unwrap();
            f.g.value(l2).clone()
        };
        let a = run(&example().context);
        let b = run(&[EncTurn { tokens: vec![11, 11, 11, 11], doc: vec![4] }]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn kat_logits_ignore_turn_segmentation() {
        let c = cfg(Variant::Kat);
        let p = Parameters::init(&c, 13).unwrap();
        let merged = TrainingExample {
            context: vec![EncTurn { tokens: vec![4, 5, 6, 9], doc: vec![7] }],
            response_doc: vec![10, 11],
            target: vec![BOS, 5, EOS],
        };
        let split = TrainingExample {
            context: vec![
                EncTurn { tokens: vec![4, 5], doc: vec![8] },
                EncTurn { tokens: vec![6], doc: vec![9] },
                EncTurn { tokens: vec![9], doc: vec![4] },
            ],
            response_doc: vec![10, 11],
            target: vec![BOS, 5, EOS],
        };
        let mut f1 = Forward::new(&c, &p, false).unwrap();
        let o1 = f1.forward_example(&merged).unwrap();
        let mut f2 = Forward::new(&c, &p, false).unwrap();
        let o2 = f2.forward_example(&split).unwrap();
        assert!(f1.g.value(o1.logits1).bit_eq(f2.g.value(o2.logits1)));
    }

    #[test]
    fn draft_tokens_stay_in_vocab_range() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 14).unwrap();
        let ex = example();
        let mut f = Forward::new(&c, &p, false).unwrap();
        let out = f.forward_example(&ex).unwrap();
        let draft = out.draft.unwrap();
        assert_eq!(draft.len(), ex.gold().len());
        assert!(draft.iter().all(|&t| (t as usize) < c.vocab_size));
    }

    #[test]
    fn rewind_prunes_dead_bindings() {
        let c = cfg(Variant::IteDd);
        let p = Parameters::init(&c, 15).unwrap();
        let ex = example();
        let mut f = Forward::new(&c, &p, false).unwrap();
        let ctx = f.encode_dialogue(&ex.context).unwrap();
        let utt = f.sa_encode(SaStack::Utterance, &[4]).unwrap();
        let mark = f.mark();
        let before = f.bound.len();
        let _ = f.decode_first_pass(&[BOS, 5], &ctx, &utt).unwrap();
        assert!(f.bound.len() > before);
        f.rewind(mark);
        assert_eq!(f.bound.len(), before);
        // Rebuilding after the rewind works and matches a fresh build.
        let l = f.decode_first_pass(&[BOS, 5], &ctx, &utt).unwrap();
        assert_eq!(f.g.value(l).shape(), &[2, 12]);
    }
}
