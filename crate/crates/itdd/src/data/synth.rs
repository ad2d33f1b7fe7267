use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Conversation, Turn};
use crate::error::{Error, Result};

/// Shape of the synthetic fact-copy corpus.
#[derive(Debug, Clone, Copy)]
pub struct FactCopyConfig {
    pub seed: u64,
    pub n_conversations: usize,
    pub n_facts: usize,
    /// Total model vocabulary budget, specials included. Keys, the three
    /// question tokens and the value pool must all fit inside it.
    pub vocab_size: usize,
}

impl FactCopyConfig {
    /// Distinct value tokens available: the budget minus 4 specials, the
    /// keys, and the question words "what", "is", "?".
    pub fn n_value_choices(&self) -> isize {
        self.vocab_size as isize - 4 - self.n_facts as isize - 3
    }
}

/// Generates conversations whose answers are recoverable only from the
/// document paired with the response turn.
///
/// Each conversation gets a fresh uniform assignment of values to keys and a
/// facts document listing every "key_i val_j" pair. The question turn
/// "what is key_i ?" is grounded in a keys-only index document, so no value
/// token is reachable through the dialogue context; the answering turn echoes
/// the key and states the value, "key_i is val_j", grounded in the facts
/// document. Because values are re-rolled per conversation, corpus statistics
/// say nothing about the right value; reading the response document answers
/// it verbatim.
pub fn gen_fact_copy_task(cfg: &FactCopyConfig) -> Result<Vec<Conversation>> {
    if cfg.n_facts < 2 {
        return Err(Error::Config(format!(
            "fact-copy task needs at least 2 facts, got {}",
            cfg.n_facts
        )));
    }
    let n_values = cfg.n_value_choices();
    if n_values < 2 {
        return Err(Error::Config(format!(
            "vocab_size {} leaves {} value tokens after specials, {} keys and \
             the question words; need at least 2",
            cfg.vocab_size, n_values, cfg.n_facts
        )));
    }
    let n_values = n_values as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_conversations);
    let key_index =
        (0..cfg.n_facts).map(|k| format!("key{k}")).collect::<Vec<_>>().join(" ");
    for _ in 0..cfg.n_conversations {
        let assignment: Vec<usize> =
            (0..cfg.n_facts).map(|_| rng.gen_range(0..n_values)).collect();
        let doc = assignment
            .iter()
            .enumerate()
            .map(|(k, &v)| format!("key{k} val{v}"))
            .collect::<Vec<_>>()
            .join(" ");
        let asked = rng.gen_range(0..cfg.n_facts);
        let mut docs = BTreeMap::new();
        docs.insert("keys".to_string(), key_index.clone());
        docs.insert("facts".to_string(), doc);
        out.push(Conversation {
            turns: vec![
                Turn {
                    speaker: "A".to_string(),
                    text: format!("what is key{asked} ?"),
                    doc: "keys".to_string(),
                },
                Turn {
                    speaker: "B".to_string(),
                    text: format!("key{asked} is val{}", assignment[asked]),
                    doc: "facts".to_string(),
                },
            ],
            docs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::tokenize;
    use crate::data::{build_vocab, make_examples};

    fn cfg() -> FactCopyConfig {
        FactCopyConfig { seed: 7, n_conversations: 20, n_facts: 4, vocab_size: 31 }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let a = gen_fact_copy_task(&cfg()).unwrap();
        let b = gen_fact_copy_task(&cfg()).unwrap();
        assert_eq!(a, b);
        let c = gen_fact_copy_task(&FactCopyConfig { seed: 8, ..cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn answers_are_verbatim_in_the_response_document_only() {
        for conv in gen_fact_copy_task(&cfg()).unwrap() {
            conv.validate().unwrap();
            assert_eq!(conv.turns.len(), 2);
            let question = tokenize(&conv.turns[0].text);
            assert_eq!(question[0], "what");
            assert_eq!(question[1], "is");
            assert_eq!(question[3], "?");
            let key = &question[2];
            let answer = tokenize(&conv.turns[1].text);
            assert_eq!(answer.len(), 3);
            assert_eq!(&answer[0], key);
            assert_eq!(answer[1], "is");
            let value = &answer[2];
            // The facts document pairs the asked key with the gold value.
            let doc = tokenize(&conv.docs[&conv.turns[1].doc]);
            let pos = doc.iter().position(|t| t == key).unwrap();
            assert_eq!(&doc[pos + 1], value);
            // The question turn's document is a value-free key index.
            let index = tokenize(&conv.docs[&conv.turns[0].doc]);
            assert!(index.contains(key));
            assert!(index.iter().all(|t| t.starts_with("key")));
        }
    }

    #[test]
    fn vocabulary_fits_the_declared_budget() {
        let c = cfg();
        let corpus = gen_fact_copy_task(&c).unwrap();
        let vocab = build_vocab(&corpus, 1, c.vocab_size).unwrap();
        assert!(vocab.len() <= c.vocab_size, "{} > {}", vocab.len(), c.vocab_size);
        // Examples extract cleanly: one per conversation, target = the
        // three answer tokens framed by BOS/EOS.
        let ex = make_examples(&corpus[0], &vocab, 3, 50, 256).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].target.len(), 5);
    }

    #[test]
    fn tight_vocab_budget_is_rejected() {
        let c = FactCopyConfig { seed: 0, n_conversations: 1, n_facts: 4, vocab_size: 12 };
        assert!(gen_fact_copy_task(&c).is_err());
        let c = FactCopyConfig { seed: 0, n_conversations: 1, n_facts: 1, vocab_size: 100 };
        assert!(gen_fact_copy_task(&c).is_err());
    }

    #[test]
    fn values_are_rerolled_per_conversation() {
        let c = FactCopyConfig { seed: 3, n_conversations: 40, n_facts: 3, vocab_size: 40 };
        let corpus = gen_fact_copy_task(&c).unwrap();
        let distinct: std::collections::BTreeSet<&String> =
            corpus.iter().map(|conv| &conv.docs["facts"]).collect();
        // 30 value choices across 3 keys and 40 conversations: collisions of
        // the whole document are overwhelmingly unlikely to leave one value.
        assert!(distinct.len() > 10, "only {} distinct fact docs", distinct.len());
    }
}
