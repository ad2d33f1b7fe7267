use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::{tokenize, Conversation};
use super::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};

const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token ↔ id bijection with the four reserved specials at ids 0..=3.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    lookup: BTreeMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        Self { tokens: v.tokens, counts: v.counts }
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        if repr.tokens.len() != repr.counts.len() {
            return Err(Error::Data(format!(
                "vocab: {} tokens but {} counts",
                repr.tokens.len(),
                repr.counts.len()
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if repr.tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Data(format!(
                    "vocab: id {i} must be {want:?}, got {:?}",
                    repr.tokens.get(i)
                )));
            }
        }
        let mut lookup = BTreeMap::new();
        for (i, tok) in repr.tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("vocab: duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens: repr.tokens, counts: repr.counts, lookup })
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.lookup.contains_key(token)
    }

    /// Id for a token, falling back to UNK.
    pub fn encode_token(&self, token: &str) -> u32 {
        self.lookup.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    /// Tokenize then map to ids.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode_tokens(&tokenize(text))
    }

    pub fn decode_token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Index(format!("token id {id} out of range for vocab of {}", self.len()))
            })
    }

    /// Ids back to text, dropping structural specials (PAD, BOS, EOS). UNK
    /// stays visible so degraded output is recognizable.
    pub fn decode_to_text(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            words.push(self.decode_token(id)?);
        }
        Ok(words.join(" "))
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }
}

/// Count every token in every turn and document, keep those seen at least
/// `min_count` times ranked by (count desc, token asc), cap at `max_size`
/// content tokens, and prepend the specials.
pub fn build_vocab(corpus: &[Conversation], min_count: u64, max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for conv in corpus {
        for turn in &conv.turns {
            for tok in tokenize(&turn.text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        for text in conv.docs.values() {
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut counts = vec![0u64; 4];
    for (tok, c) in ranked {
        tokens.push(tok);
        counts.push(c);
    }
    Vocab::try_from(VocabRepr { tokens, counts }).map_err(|e| match e {
        // A corpus token colliding with a special is a data problem, not a
        // schema one, so keep the message but re-tag it.
        Error::Data(msg) => Error::Data(format!("corpus token conflicts with specials: {msg}")),
        other => other,
    })
}
