use rand::Rng;

use crate::error::{CadaError, Result};

use super::lexicon::{PosLexicon, PosTag};
use super::vocab::{Vocabulary, CLS, ENC, MASK, PAD};

/// Special token placed at position 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leading {
    /// Text-encoder input.
    Cls,
    /// Cross-modal decoder input.
    Enc,
}

impl Leading {
    pub fn id(self) -> usize {
        match self {
            Leading::Cls => CLS,
            Leading::Enc => ENC,
        }
    }
}

/// Attribute phrase as a half-open token range `[start, end)`.
pub type Span = (usize, usize);

/// Fixed-length token ids. Positions `>= len` are `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Real tokens including the leading special.
    pub len: usize,
    /// `true` at padded positions.
    pub pad_mask: Vec<bool>,
    pub attribute_spans: Vec<Span>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn leading(&self) -> Option<Leading> {
        match self.ids.first() {
            Some(&CLS) => Some(Leading::Cls),
            Some(&ENC) => Some(Leading::Enc),
            _ => None,
        }
    }

    /// Same tokens with a different leading special.
    pub fn with_leading(&self, leading: Leading) -> Self {
        let mut s = self.clone();
        s.ids[0] = leading.id();
        s
    }

    /// `true` where attention may look (the complement of `pad_mask`).
    pub fn key_mask(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|&p| !p).collect()
    }
}

fn words_of(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Word-level tokenisation: splits on whitespace and punctuation, keeps at
/// most `max_len - 1` words, prepends the leading special and pads.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize, leading: Leading) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(CadaError::Validation(format!("max_len {max_len} leaves no room for words")));
    }
    let words = words_of(text);
    if words.is_empty() {
        return Err(CadaError::Validation("empty text".into()));
    }
    let n = words.len().min(max_len - 1);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(leading.id());
    ids.extend(words[..n].iter().map(|w| vocab.id(w)));
    let len = ids.len();
    ids.resize(max_len, PAD);
    let pad_mask = (0..max_len).map(|i| i >= len).collect();
    Ok(TokenSequence { ids, len, pad_mask, attribute_spans: Vec::new() })
}

/// Words at positions `1..len`.
pub fn detokenize(tokens: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    tokens.ids[1..tokens.len].iter().map(|&id| vocab.word(id).unwrap_or("[UNK]").to_string()).collect()
}

/// Maximal runs of one or more adjectives followed by exactly one noun,
/// scanned left to right.
pub fn extract_attributes(tokens: &TokenSequence, vocab: &Vocabulary, lexicon: &PosLexicon) -> Vec<Span> {
    let tag = |pos: usize| -> PosTag {
        let id = tokens.ids[pos];
        if Vocabulary::is_special(id) {
            return PosTag::Other;
        }
        vocab.word(id).map_or(PosTag::Other, |w| lexicon.tag(w))
    };
    let mut spans = Vec::new();
    let mut i = 1;
    while i < tokens.len {
        if tag(i) != PosTag::Adj {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < tokens.len && tag(j) == PosTag::Adj {
            j += 1;
        }
        if j < tokens.len && tag(j) == PosTag::Noun {
            spans.push((i, j + 1));
            i = j + 1;
        } else {
            i = j;
        }
    }
    spans
}

/// Tokenises and annotates attribute spans in one go.
pub fn tokenize_with_attributes(
    text: &str,
    vocab: &Vocabulary,
    lexicon: &PosLexicon,
    max_len: usize,
    leading: Leading,
) -> Result<TokenSequence> {
    let mut seq = tokenize(text, vocab, max_len, leading)?;
    seq.attribute_spans = extract_attributes(&seq, vocab, lexicon);
    Ok(seq)
}

/// Token ids with whole attribute phrases replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub ids: Vec<usize>,
    /// Ascending positions replaced by `[MASK]`.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub labels: Vec<usize>,
}

impl MaskedText {
    pub fn num_masked(&self) -> usize {
        self.mask_positions.len()
    }

    /// Undoes the masking.
    pub fn restore(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for (&p, &l) in self.mask_positions.iter().zip(&self.labels) {
            ids[p] = l;
        }
        ids
    }
}

/// Selects every span independently with probability `alpha` and masks all of
/// its tokens.
pub fn mask_attributes<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    spans: &[Span],
    alpha: f64,
    rng: &mut R,
) -> Result<MaskedText> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CadaError::Validation(format!("masking rate {alpha} outside [0, 1]")));
    }
    let mut ids = tokens.ids.clone();
    let mut mask_positions = Vec::new();
    let mut labels = Vec::new();
    for &(s, e) in spans {
        if s == 0 || e > tokens.len || s >= e {
            return Err(CadaError::Validation(format!("span ({s}, {e}) outside real tokens 1..{}", tokens.len)));
        }
        if rng.random_bool(alpha) {
            for p in s..e {
                mask_positions.push(p);
                labels.push(ids[p]);
                ids[p] = MASK;
            }
        }
    }
    Ok(MaskedText { ids, mask_positions, labels })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fixtures() -> (Vocabulary, PosLexicon) {
        let lex = PosLexicon::from_pairs([
            ("red", PosTag::Adj),
            ("black", PosTag::Adj),
            ("long", PosTag::Adj),
            ("straight", PosTag::Adj),
            ("jacket", PosTag::Noun),
            ("shoes", PosTag::Noun),
            ("hair", PosTag::Noun),
            ("person", PosTag::Noun),
            ("walks", PosTag::Other),
            ("quickly", PosTag::Other),
            ("a", PosTag::Other),
            ("with", PosTag::Other),
            ("and", PosTag::Other),
        ]);
        let vocab = Vocabulary::from_words(lex.words().collect::<Vec<_>>());
        (vocab, lex)
    }

    #[test]
    fn tokenize_pads_and_prepends() {
        let (v, _) = fixtures();
        let t = tokenize("Red jacket.", &v, 8, Leading::Cls).unwrap();
        assert_eq!(t.len, 3);
        assert_eq!(t.ids[..3], [CLS, v.id("red"), v.id("jacket")]);
        assert!(t.ids[3..].iter().all(|&i| i == PAD));
        assert_eq!(t.pad_mask, vec![false, false, false, true, true, true, true, true]);
        assert_eq!(detokenize(&t, &v), vec!["red", "jacket"]);
        assert!(matches!(tokenize("  ,. ", &v, 8, Leading::Cls), Err(CadaError::Validation(_))));
    }

    #[test]
    fn long_text_truncates_to_max_len() {
        let (v, _) = fixtures();
        let text = vec!["red"; 100].join(" ");
        let t = tokenize(&text, &v, 72, Leading::Enc).unwrap();
        assert_eq!(t.len, 72);
        assert_eq!(t.ids.len(), 72);
        assert_eq!(t.ids[0], ENC);
        assert!(!t.pad_mask.iter().any(|&p| p));
    }

    #[test]
    fn extraction_examples() {
        let (v, lex) = fixtures();
        let spans = |s: &str| extract_attributes(&tokenize(s, &v, 16, Leading::Cls).unwrap(), &v, &lex);
        assert_eq!(spans("black shoes"), vec![(1, 3)]);
        assert_eq!(spans("long straight hair"), vec![(1, 4)]);
        assert_eq!(spans("walks quickly"), vec![]);
        assert_eq!(spans("a person with long black hair and red shoes"), vec![(4, 7), (8, 10)]);
        // dangling adjective does not swallow the next phrase
        assert_eq!(spans("red and black shoes"), vec![(3, 5)]);
    }

    #[test]
    fn mask_rates_zero_and_one() {
        let (v, lex) = fixtures();
        let t = tokenize_with_attributes("a person with long black hair and red shoes", &v, &lex, 16, Leading::Enc)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = mask_attributes(&t, &t.attribute_spans, 0.0, &mut rng).unwrap();
        assert_eq!(none.num_masked(), 0);
        assert_eq!(none.ids, t.ids);
        let all = mask_attributes(&t, &t.attribute_spans, 1.0, &mut rng).unwrap();
        assert_eq!(all.mask_positions, vec![4, 5, 6, 8, 9]);
        assert_eq!(all.restore(), t.ids);
        assert!(mask_attributes(&t, &t.attribute_spans, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mask_rate_monte_carlo() {
        let (v, lex) = fixtures();
        let t = tokenize_with_attributes("red shoes", &v, &lex, 8, Leading::Enc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let masked = (0..trials)
            .filter(|_| mask_attributes(&t, &t.attribute_spans, 0.8, &mut rng).unwrap().num_masked() > 0)
            .count();
        let frac = masked as f64 / trials as f64;
        assert!((frac - 0.8).abs() < 0.02, "{frac}");
    }

    proptest! {
        #[test]
        fn masking_properties(
            words in proptest::collection::vec(0usize..13, 1..20),
            alpha in 0.0f64..=1.0,
            seed in 0u64..10_000,
        ) {
            let (v, lex) = fixtures();
            let all: Vec<&str> = lex.words().collect();
            let text = words.iter().map(|&i| all[i]).collect::<Vec<_>>().join(" ");
            let t = tokenize_with_attributes(&text, &v, &lex, 24, Leading::Enc).unwrap();
            // deterministic and idempotent extraction
            prop_assert_eq!(extract_attributes(&t, &v, &lex), t.attribute_spans.clone());
            let mut last_end = 1;
            for &(s, e) in &t.attribute_spans {
                prop_assert!(s >= last_end && s < e && e <= t.len);
                last_end = e;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mask_attributes(&t, &t.attribute_spans, alpha, &mut rng).unwrap();
            prop_assert_eq!(m.mask_positions.len(), m.labels.len());
            for &p in &m.mask_positions {
                prop_assert!(t.attribute_spans.iter().any(|&(s, e)| s <= p && p < e));
                prop_assert!(!Vocabulary::is_special(t.ids[p]));
            }
            prop_assert_eq!(m.restore(), t.ids.clone());
        }
    }
}
