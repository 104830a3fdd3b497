//! Whitespace-token vocabulary with a fixed block of reserved specials.
//!
//! Ids 0–4 are always `[PAD]`, `[UNK]`, `[CLS]`, `[SEP]`, `[MASK]`, in that order.
//! Corpus tokens rank by descending frequency, ties broken lexicographically, and the
//! whole table truncates to a configurable cap — so the same corpus always yields the
//! same table. The on-disk format is one token per line in id order.

use crate::error::{err, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
/// Number of reserved ids at the front of every vocabulary.
pub const RESERVED: usize = 5;

const SPECIALS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token table mapping whitespace-separated tokens to dense ids and back.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from corpus text. `cap` bounds the total table size,
    /// reserved specials included; it must leave room for at least one real token.
    pub fn build(text: &str, cap: usize) -> Result<Vocab> {
        if cap <= RESERVED {
            return Err(err!(Config, "vocabulary cap {cap} leaves no room after {RESERVED} reserved ids"));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for token in text.split_whitespace() {
            *counts.entry(token).or_insert(0) += 1;
        }
        // Specials never compete for slots, even if they appear in the corpus text.
        for s in SPECIALS {
            counts.remove(s);
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - RESERVED);

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Vocab::from_tokens(tokens).expect("specials are unique and present"))
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED || (0..RESERVED).any(|i| tokens[i] != SPECIALS[i]) {
            return Err(err!(
                Input,
                "vocabulary must start with the reserved tokens {SPECIALS:?}"
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(err!(Input, "duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved block is always present
    }

    /// Id for a token, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token string for an id, if the id is in range.
    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Whether an id is one of the reserved specials.
    pub fn is_special(id: usize) -> bool {
        id < RESERVED
    }

    /// Encodes one line of text as token ids (no specials added).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Writes one token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a table written by [`Vocab::save`].
    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocab::build("a b c", 100).unwrap();
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[UNK]"), UNK);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("[MASK]"), MASK);
        assert!(Vocab::is_special(PAD));
        assert!(!Vocab::is_special(RESERVED));
    }

    #[test]
    fn ranking_is_frequency_then_lexicographic() {
        let v = Vocab::build("pear pear apple banana banana apple cherry apple", 100).unwrap();
        // apple ×3, then banana and pear ×2 (banana < pear), then cherry ×1.
        assert_eq!(v.token(RESERVED), Some("apple"));
        assert_eq!(v.token(RESERVED + 1), Some("banana"));
        assert_eq!(v.token(RESERVED + 2), Some("pear"));
        assert_eq!(v.token(RESERVED + 3), Some("cherry"));
        assert_eq!(v.len(), RESERVED + 4);
    }

    #[test]
    fn cap_truncates_the_tail() {
        let v = Vocab::build("a a a b b c d e", RESERVED + 2).unwrap();
        assert_eq!(v.len(), RESERVED + 2);
        assert_eq!(v.token(RESERVED), Some("a"));
        assert_eq!(v.token(RESERVED + 1), Some("b"));
        assert_eq!(v.id("c"), UNK);
        assert!(matches!(Vocab::build("a", RESERVED), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_tokens_encode_as_unk() {
        let v = Vocab::build("known tokens only", 100).unwrap();
        assert_eq!(v.encode("known mystery"), vec![v.id("known"), UNK]);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build("alpha beta beta gamma", 100).unwrap();
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.len(), v.len());
        for id in 0..v.len() {
            assert_eq!(back.token(id), v.token(id));
        }
    }

    #[test]
    fn load_rejects_tables_without_the_reserved_block() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "apple\nbanana\n").unwrap();
        assert!(matches!(Vocab::load(&path), Err(Error::Input(_))));
    }

    #[test]
    fn specials_in_corpus_text_do_not_shift_ids() {
        let v = Vocab::build("[PAD] [PAD] word", 100).unwrap();
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.token(RESERVED), Some("word"));
    }
}
