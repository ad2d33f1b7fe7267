//! Corpus handling: JSONL conversations, tokenization, vocabulary,
//! training-example extraction and the synthetic fact-copy task.

mod corpus;
mod examples;
mod synth;
mod vocab;

pub use corpus::{
    load_corpus, merge_consecutive, save_corpus, tokenize, Conversation, Turn,
};
pub use examples::{document_ids, make_examples, utterance_ids};
pub use synth::{gen_fact_copy_task, FactCopyConfig};
pub use vocab::{build_vocab, Vocab};

/// Reserved token ids. Every vocabulary starts with these four.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

/// One context turn as the model consumes it: utterance token ids plus the
/// ids of the document grounding that turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncTurn {
    pub tokens: Vec<u32>,
    pub doc: Vec<u32>,
}

/// One supervised example: a window of context turns, the document grounding
/// the response turn, and the gold response framed by BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub context: Vec<EncTurn>,
    pub response_doc: Vec<u32>,
    /// `[BOS, tokens..., EOS]`.
    pub target: Vec<u32>,
}

impl TrainingExample {
    /// Decoder input ids: everything except the final gold token.
    pub fn decoder_input(&self) -> &[u32] {
        &self.target[..self.target.len() - 1]
    }

    /// Gold ids the decoder must predict, shifted one step.
    pub fn gold(&self) -> &[u32] {
        &self.target[1..]
    }
}

/// True for positions holding real tokens, false for PAD.
pub fn keep_mask(ids: &[u32]) -> Vec<bool> {
    ids.iter().map(|&t| t != PAD).collect()
}
