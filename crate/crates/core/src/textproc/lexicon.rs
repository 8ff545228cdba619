use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{CadaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosTag {
    Adj,
    Noun,
    Other,
}

impl PosTag {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ADJ" => Some(PosTag::Adj),
            "NOUN" => Some(PosTag::Noun),
            "OTHER" => Some(PosTag::Other),
            _ => None,
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosTag::Adj => "ADJ",
            PosTag::Noun => "NOUN",
            PosTag::Other => "OTHER",
        })
    }
}

/// Deterministic word → part-of-speech table; unknown words are `Other`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosLexicon {
    tags: BTreeMap<String, PosTag>,
}

impl PosLexicon {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, PosTag)>,
        S: AsRef<str>,
    {
        PosLexicon { tags: pairs.into_iter().map(|(w, t)| (w.as_ref().to_lowercase(), t)).collect() }
    }

    pub fn tag(&self, word: &str) -> PosTag {
        self.tags.get(word).copied().unwrap_or(PosTag::Other)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.tags.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tags.keys().map(String::as_str)
    }

    /// Parses `word<TAB>TAG` lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tags = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, tag) = line
                .split_once('\t')
                .ok_or_else(|| CadaError::Load(format!("lexicon line {}: expected word<TAB>TAG", n + 1)))?;
            let tag = PosTag::parse(tag)
                .ok_or_else(|| CadaError::Load(format!("lexicon line {}: unknown tag {tag:?}", n + 1)))?;
            tags.insert(word.trim().to_lowercase(), tag);
        }
        Ok(PosLexicon { tags })
    }

    pub fn to_text(&self) -> String {
        self.tags.iter().map(|(w, t)| format!("{w}\t{t}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CadaError::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CadaError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip_and_errors() {
        let lex = PosLexicon::parse("red\tADJ\nshoes\tNOUN\n\nand\tOTHER\n").unwrap();
        assert_eq!(lex.tag("red"), PosTag::Adj);
        assert_eq!(lex.tag("shoes"), PosTag::Noun);
        assert_eq!(lex.tag("unknown"), PosTag::Other);
        assert_eq!(PosLexicon::parse(&lex.to_text()).unwrap(), lex);
        assert!(PosLexicon::parse("red ADJ").is_err());
        assert!(PosLexicon::parse("red\tVERB").is_err());
    }
}
