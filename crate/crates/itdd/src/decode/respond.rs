use super::beam::beam_search;
use super::metrics::{bleu, perplexity, space_tokens, PplReport};
use crate::data::{
    document_ids, utterance_ids, EncTurn, TrainingExample, Vocab, BOS,
};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelConfig, Parameters, SaStack, Variant};
use crate::train::Checkpoint;

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 30;

/// Both decoding passes for one reply. Single-pass variants repeat their
/// only output in both slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub first_tokens: Vec<u32>,
    pub final_tokens: Vec<u32>,
    pub first_text: String,
    pub final_text: String,
}

/// Beam-decodes a reply to `context` grounded in `response_doc`. For the
/// two-pass variant the top first-pass hypothesis is re-encoded and refined
/// by the second pass; both passes are surfaced so callers can show the
/// revision.
pub fn respond(
    cfg: &ModelConfig,
    params: &Parameters,
    vocab: &Vocab,
    context: &[EncTurn],
    response_doc: &[u32],
    beam: usize,
    max_len: usize,
) -> Result<Response> {
    if context.is_empty() {
        return Err(Error::Contract("respond needs at least one context turn".into()));
    }
    let mut f = Forward::new(cfg, params, false)?;

    // One beam step: logits for the BOS-framed prefix, last row as
    // log-probabilities, then the tape is rewound to the encodings.
    fn step_rows(f: &mut Forward, logits: crate::tensor::Var) -> Result<Vec<f64>> {
        let lp = f.g.log_softmax(logits, 1)?;
        let t = f.g.value(lp);
        let last = t.rows() - 1;
        Ok((0..t.cols()).map(|j| t.at(last, j)).collect())
    }
    fn framed(toks: &[u32]) -> Vec<u32> {
        let mut prefix = Vec::with_capacity(toks.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(toks);
        prefix
    }

    match cfg.variant {
        Variant::IteDd => {
            let ctx = f.encode_dialogue(context)?;
            let last = context.last().expect("nonempty context");
            let utt = f.sa_encode(SaStack::Utterance, &last.tokens)?;
            let first = beam_search(
                |toks| {
                    let mark = f.mark();
                    let logits = f.decode_first_pass(&framed(toks), &ctx, &utt)?;
                    let row = step_rows(&mut f, logits);
                    f.rewind(mark);
                    row
                },
                beam,
                max_len,
            )?;
            let draft = f.sa_encode(SaStack::Utterance, &first.tokens)?;
            let doc = f.sa_encode(SaStack::Document, response_doc)?;
            let second = beam_search(
                |toks| {
                    let mark = f.mark();
                    let logits = f.decode_second_pass(&framed(toks), &draft, &doc)?;
                    let row = step_rows(&mut f, logits);
                    f.rewind(mark);
                    row
                },
                beam,
                max_len,
            )?;
            Ok(Response {
                first_text: vocab.decode_to_text(&first.tokens)?,
                final_text: vocab.decode_to_text(&second.tokens)?,
                first_tokens: first.tokens,
                final_tokens: second.tokens,
            })
        }
        Variant::IteCkad => {
            let ctx = f.encode_dialogue(context)?;
            let doc = f.sa_encode(SaStack::Document, response_doc)?;
            let only = beam_search(
                |toks| {
                    let mark = f.mark();
                    let logits = f.decode_ckad(&framed(toks), &ctx, &doc)?;
                    let row = step_rows(&mut f, logits);
                    f.rewind(mark);
                    row
                },
                beam,
                max_len,
            )?;
            let text = vocab.decode_to_text(&only.tokens)?;
            Ok(Response {
                first_text: text.clone(),
                final_text: text,
                first_tokens: only.tokens.clone(),
                final_tokens: only.tokens,
            })
        }
        Variant::Kat => {
            let doc = f.sa_encode(SaStack::Document, response_doc)?;
            let src = f.kat_encode(context, &doc)?;
            let only = beam_search(
                |toks| {
                    let mark = f.mark();
                    let logits = f.decode_kat(&framed(toks), &src)?;
                    let row = step_rows(&mut f, logits);
                    f.rewind(mark);
                    row
                },
                beam,
                max_len,
            )?;
            let text = vocab.decode_to_text(&only.tokens)?;
            Ok(Response {
                first_text: text.clone(),
                final_text: text,
                first_tokens: only.tokens.clone(),
                final_tokens: only.tokens,
            })
        }
    }
}

/// Evaluation bundle: teacher-forced perplexities, corpus BLEU of beam
/// decodes against the gold responses, and the decoded strings.
#[derive(Debug)]
pub struct EvalReport {
    pub variant: String,
    pub ppl: PplReport,
    pub bleu: f64,
    pub decoded: Vec<String>,
}

pub fn evaluate(
    cfg: &ModelConfig,
    params: &Parameters,
    vocab: &Vocab,
    examples: &[TrainingExample],
    beam: usize,
    max_len: usize,
) -> Result<EvalReport> {
    let ppl = perplexity(cfg, params, examples)?;
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    let mut decoded = Vec::with_capacity(examples.len());
    for ex in examples {
        let r = respond(cfg, params, vocab, &ex.context, &ex.response_doc, beam, max_len)?;
        hyps.push(space_tokens(&r.final_text));
        refs.push(space_tokens(&vocab.decode_to_text(ex.gold())?));
        decoded.push(r.final_text);
    }
    let bleu_score = bleu(&hyps, &refs)?;
    Ok(EvalReport {
        variant: cfg.variant.to_string(),
        ppl,
        bleu: bleu_score,
        decoded,
    })
}

/// Dialogue state for the interactive loop: raw turns, their encodings, and
/// the active document. Replies re-encode the last `window` turns from the
/// empty state, so only those turns influence the reply.
pub struct ChatSession<'a> {
    ck: &'a Checkpoint,
    beam: usize,
    max_len: usize,
    doc_text: String,
    doc: Vec<u32>,
    turns: Vec<EncTurn>,
    raw: Vec<(String, String)>,
}

impl<'a> ChatSession<'a> {
    pub fn new(ck: &'a Checkpoint, doc_text: &str, beam: usize, max_len: usize) -> Self {
        let doc = document_ids(&ck.vocab, doc_text, ck.model.doc_cap);
        Self {
            ck,
            beam,
            max_len,
            doc_text: doc_text.to_string(),
            doc,
            turns: Vec::new(),
            raw: Vec::new(),
        }
    }

    /// Swap the grounding document; takes effect from the next turn.
    pub fn set_doc(&mut self, text: &str) {
        self.doc_text = text.to_string();
        self.doc = document_ids(&self.ck.vocab, text, self.ck.model.doc_cap);
    }

    /// Drop all dialogue history; the next reply starts from the empty
    /// context state.
    pub fn reset(&mut self) {
        self.turns.clear();
        self.raw.clear();
    }

    /// The turns the next reply will condition on.
    pub fn window(&self) -> &[EncTurn] {
        let w = self.ck.model.window;
        let start = self.turns.len().saturating_sub(w);
        &self.turns[start..]
    }

    pub fn say(&mut self, text: &str) -> Result<Response> {
        let tokens = utterance_ids(&self.ck.vocab, text, self.ck.model.utt_cap);
        self.turns.push(EncTurn { tokens, doc: self.doc.clone() });
        self.raw.push(("A".to_string(), text.to_string()));
        let response = respond(
            &self.ck.model,
            &self.ck.params,
            &self.ck.vocab,
            self.window(),
            &self.doc,
            self.beam,
            self.max_len,
        )?;
        let reply_tokens =
            utterance_ids(&self.ck.vocab, &response.final_text, self.ck.model.utt_cap);
        self.turns.push(EncTurn { tokens: reply_tokens, doc: self.doc.clone() });
        self.raw.push(("B".to_string(), response.final_text.clone()));
        Ok(response)
    }

    /// The session as a corpus conversation, appendable to a JSONL file.
    pub fn transcript(&self) -> crate::data::Conversation {
        let turns = self
            .raw
            .iter()
            .map(|(speaker, text)| crate::data::Turn {
                speaker: speaker.clone(),
                text: text.clone(),
                doc: "session".to_string(),
            })
            .collect();
        let docs = [("session".to_string(), self.doc_text.clone())]
            .into_iter()
            .collect();
        crate::data::Conversation { turns, docs }
    }
}
