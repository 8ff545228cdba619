//! Synthetic attribute-person dataset and minibatch assembly.

pub mod generate;
pub mod store;

use std::collections::HashSet;

use rand::Rng;

use crate::error::{CadaError, Result};
use crate::textproc::{mask_attributes, tokenize_with_attributes, Leading, MaskedText, TokenSequence};

pub use generate::PersonSpec;
pub use store::{generate_dataset, load_dataset, Dataset, DatasetRecord, GenerateOptions, GenerationSummary, Split};

const MAX_BATCH_RETRIES: usize = 32;

/// `N_z` aligned image/caption pairs. Index `i` of every field belongs to
/// pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// Dataset record behind each pair.
    pub records: Vec<usize>,
    pub identities: Vec<usize>,
    pub images: Vec<Vec<f32>>,
    /// Text-encoder input, led by `[CLS]`.
    pub texts: Vec<TokenSequence>,
    /// Decoder input, led by `[ENC]`.
    pub dec_texts: Vec<TokenSequence>,
    pub masked: Vec<MaskedText>,
    /// Masked decoder input.
    pub masked_texts: Vec<TokenSequence>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn distinct_identities(&self) -> usize {
        self.identities.iter().collect::<HashSet<_>>().len()
    }
}

/// Builds the batch for a fixed list of records.
pub fn batch_from_records<R: Rng + ?Sized>(
    data: &Dataset,
    records: &[usize],
    max_len: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<PairBatch> {
    let mut b = PairBatch {
        records: records.to_vec(),
        identities: Vec::with_capacity(records.len()),
        images: Vec::with_capacity(records.len()),
        texts: Vec::with_capacity(records.len()),
        dec_texts: Vec::with_capacity(records.len()),
        masked: Vec::with_capacity(records.len()),
        masked_texts: Vec::with_capacity(records.len()),
    };
    for &r in records {
        let rec = &data.records[r];
        let dec = tokenize_with_attributes(&rec.caption, &data.vocab, &data.lexicon, max_len, Leading::Enc)?;
        let masked = mask_attributes(&dec, &dec.attribute_spans, alpha, rng)?;
        let mut masked_seq = dec.clone();
        masked_seq.ids.clone_from(&masked.ids);
        b.identities.push(rec.id);
        b.images.push(data.image_of(r).data.clone());
        b.texts.push(dec.with_leading(Leading::Cls));
        b.dec_texts.push(dec);
        b.masked.push(masked);
        b.masked_texts.push(masked_seq);
    }
    Ok(b)
}

/// Samples `n_z` distinct records from `pool` (resampling until at least two
/// identities are present) and tokenises and masks their captions.
pub fn make_batch<R: Rng + ?Sized>(
    data: &Dataset,
    pool: &[usize],
    n_z: usize,
    max_len: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<PairBatch> {
    if n_z < 2 || n_z > pool.len() {
        return Err(CadaError::Batch(format!("cannot draw {n_z} pairs from a pool of {}", pool.len())));
    }
    for _ in 0..MAX_BATCH_RETRIES {
        let picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), n_z).into_iter().map(|i| pool[i]).collect();
        let ids: HashSet<usize> = picked.iter().map(|&r| data.records[r].id).collect();
        if ids.len() >= 2 {
            return batch_from_records(data, &picked, max_len, alpha, rng);
        }
    }
    Err(CadaError::Batch(format!(
        "no batch of {n_z} pairs with two identities after {MAX_BATCH_RETRIES} draws"
    )))
}

#[cfg(test)]
mod tests;
