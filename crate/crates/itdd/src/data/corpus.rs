use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One utterance: who said it, the raw text, and the id of the document
/// grounding it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    pub doc: String,
}

/// A whole conversation plus its document store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
    pub docs: BTreeMap<String, String>,
}

impl Conversation {
    /// Speakers must come from {A, B} and every referenced document must
    /// resolve.
    pub fn validate(&self) -> Result<()> {
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.speaker != "A" && turn.speaker != "B" {
                return Err(Error::Data(format!(
                    "turn {i}: speaker {:?} is not A or B",
                    turn.speaker
                )));
            }
            if !self.docs.contains_key(&turn.doc) {
                return Err(Error::Data(format!(
                    "turn {i}: document id {:?} not in docs",
                    turn.doc
                )));
            }
        }
        Ok(())
    }
}

/// Characters split off as single-token punctuation. The colon is included
/// so "tomatoes:" tokenizes as ["tomatoes", ":"].
const PUNCT: &[char] = &['.', ',', '!', '?', '\'', '"', ':'];

/// Lowercase, split on whitespace, and peel punctuation into its own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut buf = String::new();
        for ch in chunk.to_lowercase().chars() {
            if PUNCT.contains(&ch) {
                if !buf.is_empty() {
                    out.push(std::mem::take(&mut buf));
                }
                out.push(ch.to_string());
            } else {
                buf.push(ch);
            }
        }
        if !buf.is_empty() {
            out.push(buf);
        }
    }
    out
}

/// Joins adjacent turns by the same speaker with a single space. The merged
/// turn keeps the document id of its first constituent. Idempotent.
pub fn merge_consecutive(conv: &Conversation) -> Conversation {
    let mut turns: Vec<Turn> = Vec::new();
    for turn in &conv.turns {
        match turns.last_mut() {
            Some(last) if last.speaker == turn.speaker => {
                last.text.push(' ');
                last.text.push_str(&turn.text);
            }
            _ => turns.push(turn.clone()),
        }
    }
    Conversation { turns, docs: conv.docs.clone() }
}

/// Reads a JSONL corpus, one conversation per line. Blank lines are skipped;
/// anything else that fails to parse or validate names its line number.
pub fn load_corpus(path: &Path) -> Result<Vec<Conversation>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        conv.validate()
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(conv);
    }
    Ok(out)
}

/// Writes conversations as JSONL with deterministic field order.
pub fn save_corpus(path: &Path, corpus: &[Conversation]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for conv in corpus {
        let line = serde_json::to_string(conv)
            .map_err(|e| Error::Data(format!("serialize: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(turns: &[(&str, &str)]) -> Conversation {
        let mut docs = BTreeMap::new();
        docs.insert("d0".to_string(), "some document".to_string());
        Conversation {
            turns: turns
                .iter()
                .map(|(s, t)| Turn {
                    speaker: s.to_string(),
                    text: t.to_string(),
                    doc: "d0".to_string(),
                })
                .collect(),
            docs,
        }
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Hello!"), vec!["hello", "!"]);
        assert_eq!(
            tokenize("How's it going?"),
            vec!["how", "'", "s", "it", "going", "?"]
        );
        assert_eq!(
            tokenize("Rotten Tomatoes: 81%"),
            vec!["rotten", "tomatoes", ":", "81%"]
        );
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("   \t\n "), Vec::<String>::new());
    }

    #[test]
    fn merge_reproduces_the_reference_example() {
        let c = conv(&[("A", "Hello!"), ("B", "Hi!"), ("B", "How's it going?")]);
        let merged = merge_consecutive(&c);
        assert_eq!(merged.turns.len(), 2);
        assert_eq!(merged.turns[0].text, "Hello!");
        assert_eq!(merged.turns[1].text, "Hi! How's it going?");
        assert_eq!(merged.turns[1].speaker, "B");
    }

    #[test]
    fn merge_leaves_alternating_speakers_unchanged() {
        let c = conv(&[("A", "x"), ("B", "y"), ("A", "z")]);
        assert_eq!(merge_consecutive(&c), c);
    }

    #[test]
    fn merge_folds_a_run_of_three() {
        let c = conv(&[("A", "one"), ("A", "two"), ("A", "three")]);
        let merged = merge_consecutive(&c);
        assert_eq!(merged.turns.len(), 1);
        assert_eq!(merged.turns[0].text, "one two three");
    }

    #[test]
    fn merge_keeps_first_constituents_document() {
        let mut c = conv(&[("A", "one"), ("A", "two")]);
        c.docs.insert("d1".to_string(), "other".to_string());
        c.turns[1].doc = "d1".to_string();
        let merged = merge_consecutive(&c);
        assert_eq!(merged.turns[0].doc, "d0");
    }

    #[test]
    fn merge_is_idempotent_on_random_speaker_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let turns: Vec<(&str, &str)> = (0..n)
                .map(|_| (if rng.gen_bool(0.5) { "A" } else { "B" }, "t"))
                .collect();
            let c = conv(&turns);
            let once = merge_consecutive(&c);
            let twice = merge_consecutive(&once);
            assert_eq!(once, twice);
            for pair in once.turns.windows(2) {
                assert_ne!(pair[0].speaker, pair[1].speaker);
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let c1 = conv(&[("A", "Hello!"), ("B", "Hi there.")]);
        let mut c2 = conv(&[("B", "Rotten Tomatoes: 81%")]);
        c2.docs.insert("extra".to_string(), "another doc".to_string());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&path, &[c1.clone(), c2.clone()]).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, vec![c1, c2]);
    }

    #[test]
    fn load_accepts_unknown_fields_and_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"turns":[{"speaker":"A","text":"hi","doc":"d","mood":"glad"}],"docs":{"d":"x"},"extra":1}"#,
                "\n\n",
            ),
        )
        .unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].turns[0].text, "hi");
    }

    #[test]
    fn load_names_the_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"turns":[{"speaker":"A","text":"hi","doc":"d"}],"docs":{"d":"x"}}"#,
                "\n",
                "not json\n",
            ),
        )
        .unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn load_rejects_missing_fields_and_bad_references() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, r#"{"turns":[{"speaker":"A","doc":"d"}],"docs":{"d":"x"}}"#)
            .unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        std::fs::write(
            &path,
            r#"{"turns":[{"speaker":"A","text":"hi","doc":"nope"}],"docs":{"d":"x"}}"#,
        )
        .unwrap();
        assert!(load_corpus(&path).is_err());

        std::fs::write(
            &path,
            r#"{"turns":[{"speaker":"C","text":"hi","doc":"d"}],"docs":{"d":"x"}}"#,
        )
        .unwrap();
        assert!(load_corpus(&path).is_err());
    }

    #[test]
    fn load_of_empty_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }
}
