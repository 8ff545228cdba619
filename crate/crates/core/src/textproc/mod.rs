//! Word tokenisation, `[adj]+[noun]` attribute extraction and attribute masking.

pub mod lexicon;
pub mod sequence;
pub mod vocab;

pub use lexicon::{PosLexicon, PosTag};
pub use sequence::{
    detokenize, extract_attributes, mask_attributes, tokenize, tokenize_with_attributes, Leading, MaskedText, Span,
    TokenSequence,
};
pub use vocab::Vocabulary;
