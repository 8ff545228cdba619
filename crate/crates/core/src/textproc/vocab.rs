use std::collections::HashMap;
use std::path::Path;

use crate::error::{CadaError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const ENC: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[ENC]", "[MASK]"];

/// Closed word-level vocabulary. Ids are dense; the five specials come first.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from plain words (duplicates and specials ignored),
    /// keeping first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary { words: Vec::new(), index: HashMap::new() };
        for name in SPECIAL_NAMES {
            v.push(name);
        }
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if !w.is_empty() && !v.index.contains_key(&w) {
                v.push(&w);
            }
        }
        v
    }

    fn push(&mut self, w: &str) {
        self.index.insert(w.to_string(), self.words.len());
        self.words.push(w.to_string());
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of a word; out-of-vocabulary words map to [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Plain words (no specials), one per line; line `i` has id `i + 5`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words[NUM_SPECIAL..] {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let v = Self::from_words(&words);
        if v.len() != words.len() + NUM_SPECIAL {
            return Err(CadaError::Load("vocabulary file contains duplicate or reserved words".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CadaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| CadaError::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_dense_and_distinct() {
        let v = Vocabulary::from_words(["red", "jacket", "red"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.word(PAD), Some("[PAD]"));
        assert_eq!(v.word(MASK), Some("[MASK]"));
        assert_eq!(v.id("red"), 5);
        assert_eq!(v.id("jacket"), 6);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn file_line_number_is_id_offset() {
        let v = Vocabulary::from_text("alpha\nbeta\n").unwrap();
        assert_eq!(v.id("beta"), NUM_SPECIAL + 1);
        assert!(Vocabulary::from_text("a\na\n").is_err());
    }
}
