//! Procedural attribute persons: band images and templated captions.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CadaError, Result};
use crate::textproc::{PosLexicon, PosTag, Vocabulary};

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("black", [0.1, 0.1, 0.1]),
    ("white", [0.9, 0.9, 0.9]),
    ("red", [0.85, 0.12, 0.12]),
    ("green", [0.12, 0.65, 0.2]),
    ("blue", [0.12, 0.22, 0.85]),
    ("yellow", [0.9, 0.85, 0.12]),
    ("gray", [0.5, 0.5, 0.5]),
    ("purple", [0.55, 0.15, 0.7]),
];

pub const HAIR_COLORS: [(&str, [f32; 3]); 3] =
    [("black", [0.1, 0.1, 0.1]), ("brown", [0.45, 0.28, 0.12]), ("blonde", [0.92, 0.8, 0.45])];

pub const HAIR_LENGTHS: [&str; 2] = ["short", "long"];
pub const TOPS: [&str; 3] = ["jacket", "shirt", "coat"];
pub const BOTTOMS: [&str; 3] = ["pants", "skirt", "shorts"];
pub const FOOTWEAR: [&str; 2] = ["shoes", "boots"];

/// Number of distinct attribute assignments.
pub const CAPACITY: usize = HAIR_LENGTHS.len()
    * HAIR_COLORS.len()
    * (PALETTE.len() * TOPS.len())
    * (PALETTE.len() * BOTTOMS.len())
    * (PALETTE.len() * FOOTWEAR.len());

const TEXTURE_AMP: f32 = 0.12;
const NOISE_STD: f64 = 0.05;
const BAND_JITTER: i64 = 2;

const OTHER_WORDS: [&str; 14] = [
    "a", "the", "this", "with", "wearing", "wears", "and", "in", "has", "is", "who", "walking", "also", "carrying",
];
const SUBJECTS: [&str; 4] = ["person", "pedestrian", "individual", "bag"];

/// `{H}` hair, `{T}` top, `{B}` bottom, `{S}` footwear.
pub const TEMPLATES: [&str; 9] = [
    "a person with {H} wearing a {T} and {B}",
    "the pedestrian wears a {T} with {B} and {S}",
    "a person in a {T} and {S}",
    "the person has {H} and is wearing {B} and {S}",
    "a pedestrian with {H} in a {T} {B} and {S}",
    "walking person wearing {S} and a {T}",
    "a person with {H} and {S} carrying a bag",
    "the individual wears {B} and a {T} and has {H}",
    "this person who has {H} is wearing a {T} with {B} and also {S}",
];

/// Attribute assignment of one identity, as indices into the tables above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PersonSpec {
    pub identity_id: usize,
    pub hair_length: usize,
    pub hair_color: usize,
    pub top_color: usize,
    pub top_type: usize,
    pub bottom_color: usize,
    pub bottom_type: usize,
    pub shoe_color: usize,
    pub shoe_type: usize,
}

impl PersonSpec {
    fn key(&self) -> [usize; 8] {
        [
            self.hair_length,
            self.hair_color,
            self.top_color,
            self.top_type,
            self.bottom_color,
            self.bottom_type,
            self.shoe_color,
            self.shoe_type,
        ]
    }

    pub fn random<R: Rng + ?Sized>(identity_id: usize, rng: &mut R) -> Self {
        PersonSpec {
            identity_id,
            hair_length: rng.random_range(0..HAIR_LENGTHS.len()),
            hair_color: rng.random_range(0..HAIR_COLORS.len()),
            top_color: rng.random_range(0..PALETTE.len()),
            top_type: rng.random_range(0..TOPS.len()),
            bottom_color: rng.random_range(0..PALETTE.len()),
            bottom_type: rng.random_range(0..BOTTOMS.len()),
            shoe_color: rng.random_range(0..PALETTE.len()),
            shoe_type: rng.random_range(0..FOOTWEAR.len()),
        }
    }

    /// Attribute phrases in slot order: hair, top, bottom, footwear.
    pub fn phrases(&self) -> [String; 4] {
        [
            format!("{} {} hair", HAIR_LENGTHS[self.hair_length], HAIR_COLORS[self.hair_color].0),
            format!("{} {}", PALETTE[self.top_color].0, TOPS[self.top_type]),
            format!("{} {}", PALETTE[self.bottom_color].0, BOTTOMS[self.bottom_type]),
            format!("{} {}", PALETTE[self.shoe_color].0, FOOTWEAR[self.shoe_type]),
        ]
    }

    /// Band colours top to bottom.
    pub fn band_colors(&self) -> [[f32; 3]; 4] {
        [
            HAIR_COLORS[self.hair_color].1,
            PALETTE[self.top_color].1,
            PALETTE[self.bottom_color].1,
            PALETTE[self.shoe_color].1,
        ]
    }
}

/// Distinct specs for identities `0..n`, drawn without replacement.
pub fn sample_specs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<PersonSpec>> {
    if n < 2 {
        return Err(CadaError::Generation(format!(
            "{n} identities requested; at least 2 are needed so every batch has hard negatives (capacity {CAPACITY})"
        )));
    }
    if n > CAPACITY {
        return Err(CadaError::Generation(format!(
            "{n} identities requested but the attribute space holds only {CAPACITY} distinct persons"
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = PersonSpec::random(out.len(), rng);
        if seen.insert(s.key()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Nominal band boundaries at quarters of the height, each shifted by up to
/// ±2 pixels.
pub fn band_boundaries<R: Rng + ?Sized>(height: usize, rng: &mut R) -> [usize; 3] {
    let mut b = [0usize; 3];
    for (i, slot) in b.iter_mut().enumerate() {
        let nominal = (height * (i + 1) / 4) as i64;
        let shift = rng.random_range(-BAND_JITTER..=BAND_JITTER);
        *slot = (nominal + shift).clamp(1, height as i64 - 1) as usize;
    }
    b
}

/// Texture of the garment type in a band, zero-mean over whole periods.
fn texture(band: usize, spec: &PersonSpec, x: usize, y: usize) -> f32 {
    let stripe_v = if (x / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let stripe_h = if (y / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let pattern = match band {
        0 => [0.0, stripe_v][spec.hair_length],
        1 => [0.0, stripe_h, stripe_v][spec.top_type],
        2 => [0.0, stripe_h, stripe_v][spec.bottom_type],
        _ => [0.0, stripe_h * stripe_v][spec.shoe_type],
    };
    pattern * TEXTURE_AMP
}

/// `size × size × 3` row-major image in `[0, 1]`.
pub fn render<R: Rng + ?Sized>(spec: &PersonSpec, size: usize, rng: &mut R) -> Vec<f32> {
    let bounds = band_boundaries(size, rng);
    let flip = rng.random_bool(0.5);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let colors = spec.band_colors();
    let mut img = vec![0f32; size * size * 3];
    for y in 0..size {
        let band = bounds.iter().filter(|&&b| y >= b).count();
        for x in 0..size {
            let tx = if flip { size - 1 - x } else { x };
            let t = texture(band, spec, tx, y);
            for c in 0..3 {
                let v = colors[band][c] + t + noise.sample(rng) as f32;
                img[(y * size + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Flips an HWC image horizontally with probability one half and adds
/// fresh pixel noise.
pub fn augment<R: Rng + ?Sized>(img: &mut [f32], size: usize, rng: &mut R) {
    if rng.random_bool(0.5) {
        for row in img.chunks_exact_mut(size * 3) {
            for x in 0..size / 2 {
                for c in 0..3 {
                    row.swap(x * 3 + c, (size - 1 - x) * 3 + c);
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    for v in img.iter_mut() {
        *v = (*v + noise.sample(rng) as f32).clamp(0.0, 1.0);
    }
}

/// A caption that mentions at least two of the identity's attribute phrases.
/// Returns the caption and the phrases it used.
pub fn caption<R: Rng + ?Sized>(spec: &PersonSpec, rng: &mut R) -> (String, Vec<String>) {
    let template = TEMPLATES.choose(rng).expect("templates are non-empty");
    let [h, t, b, s] = spec.phrases();
    let mut used = Vec::new();
    let mut out = String::new();
    let mut rest = *template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let slot = &rest[open + 1..open + 2];
        let phrase = match slot {
            "H" => &h,
            "T" => &t,
            "B" => &b,
            _ => &s,
        };
        out.push_str(phrase);
        used.push(phrase.clone());
        rest = &rest[open + 3..];
    }
    out.push_str(rest);
    (out, used)
}

/// Part-of-speech table covering every word the generator can emit.
pub fn lexicon() -> PosLexicon {
    let mut pairs: Vec<(&str, PosTag)> = Vec::new();
    pairs.extend(HAIR_LENGTHS.iter().map(|w| (*w, PosTag::Adj)));
    pairs.extend(HAIR_COLORS.iter().map(|c| (c.0, PosTag::Adj)));
    pairs.extend(PALETTE.iter().map(|c| (c.0, PosTag::Adj)));
    pairs.push(("hair", PosTag::Noun));
    pairs.extend(TOPS.iter().chain(&BOTTOMS).chain(&FOOTWEAR).map(|w| (*w, PosTag::Noun)));
    pairs.extend(SUBJECTS.iter().map(|w| (*w, PosTag::Noun)));
    pairs.extend(OTHER_WORDS.iter().map(|w| (*w, PosTag::Other)));
    PosLexicon::from_pairs(pairs)
}

/// Closed vocabulary of the generator.
pub fn vocabulary() -> Vocabulary {
    Vocabulary::from_words(lexicon().words())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::textproc::{detokenize, tokenize_with_attributes, Leading};

    #[test]
    fn specs_are_distinct_and_capacity_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = sample_specs(500, &mut rng).unwrap();
        let keys: HashSet<_> = specs.iter().map(PersonSpec::key).collect();
        assert_eq!(keys.len(), 500);
        assert!(matches!(sample_specs(1, &mut rng), Err(CadaError::Generation(_))));
        assert!(sample_specs(CAPACITY + 1, &mut rng).unwrap_err().to_string().contains(&CAPACITY.to_string()));
    }

    #[test]
    fn band_means_stay_near_palette() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in sample_specs(40, &mut rng).unwrap() {
            let img = render(&spec, 32, &mut rng);
            for (band, color) in spec.band_colors().iter().enumerate() {
                // rows that belong to the band whatever the jitter
                let (y0, y1) = (band * 8 + 2, band * 8 + 6);
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in 0..32 {
                            s += img[(y * 32 + x) * 3 + c];
                        }
                    }
                    let mean = s / ((y1 - y0) * 32) as f32;
                    assert!((mean - color[c]).abs() < 0.15, "band {band} channel {c}: {mean} vs {}", color[c]);
                }
            }
        }
    }

    #[test]
    fn every_caption_yields_its_phrases() {
        let lex = lexicon();
        let vocab = vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in sample_specs(100, &mut rng).unwrap() {
            for _ in 0..4 {
                let (text, used) = caption(&spec, &mut rng);
                assert!(used.len() >= 2);
                let t = tokenize_with_attributes(&text, &vocab, &lex, 24, Leading::Cls).unwrap();
                assert!(t.len < 24, "caption too long: {text}");
                let words = detokenize(&t, &vocab);
                let found: Vec<String> =
                    t.attribute_spans.iter().map(|&(s, e)| words[s - 1..e - 1].join(" ")).collect();
                assert_eq!(found, used, "{text}");
            }
        }
    }

    #[test]
    fn generator_words_are_in_lexicon() {
        let lex = lexicon();
        for t in TEMPLATES {
            for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
                assert!(lex.contains(w), "{w}");
            }
        }
        assert_eq!(vocabulary().len(), lex.len() + crate::textproc::vocab::NUM_SPECIAL);
    }
}
