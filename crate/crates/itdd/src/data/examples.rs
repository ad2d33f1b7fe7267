use super::corpus::{tokenize, Conversation};
use super::vocab::Vocab;
use super::{EncTurn, TrainingExample, BOS, EOS, UNK};
use crate::error::{Error, Result};

/// Utterance ids, capped to the first `utt_cap` tokens. Empty text becomes a
/// single UNK so every sequence has at least one real position.
pub fn utterance_ids(vocab: &Vocab, text: &str, utt_cap: usize) -> Vec<u32> {
    let mut ids = vocab.encode_tokens(&tokenize(text));
    if ids.is_empty() {
        ids.push(UNK);
    }
    ids.truncate(utt_cap);
    ids
}

/// Document ids, keeping the last `doc_cap` tokens: later sections tend to
/// carry the specifics a reply needs, and the cap has to cut somewhere.
pub fn document_ids(vocab: &Vocab, text: &str, doc_cap: usize) -> Vec<u32> {
    let mut ids = vocab.encode_tokens(&tokenize(text));
    if ids.is_empty() {
        ids.push(UNK);
    }
    if ids.len() > doc_cap {
        ids.drain(..ids.len() - doc_cap);
    }
    ids
}

/// One example per response position: for every turn index t ≥ 1, the
/// context is the previous `window` turns and the target is turn t framed by
/// BOS/EOS, grounded in turn t's document. Conversations with fewer than two
/// turns yield nothing.
pub fn make_examples(
    conv: &Conversation,
    vocab: &Vocab,
    window: usize,
    utt_cap: usize,
    doc_cap: usize,
) -> Result<Vec<TrainingExample>> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let doc_text = |id: &str| -> Result<&str> {
        conv.docs
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("document id {id:?} not in docs")))
    };
    let mut out = Vec::new();
    for t in 1..conv.turns.len() {
        let context = conv.turns[t.saturating_sub(window)..t]
            .iter()
            .map(|turn| {
                Ok(EncTurn {
                    tokens: utterance_ids(vocab, &turn.text, utt_cap),
                    doc: document_ids(vocab, doc_text(&turn.doc)?, doc_cap),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let response = &conv.turns[t];
        let mut target = vec![BOS];
        target.extend(utterance_ids(vocab, &response.text, utt_cap));
        target.push(EOS);
        out.push(TrainingExample {
            context,
            response_doc: document_ids(vocab, doc_text(&response.doc)?, doc_cap),
            target,
        });
    }
    Ok(out)
}
