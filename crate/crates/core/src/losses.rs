//! NDF, ATP and ARA losses, grouping, hard-negative mining and the combined
//! objective.

use crate::config::LossConfig;
use crate::data::PairBatch;
use crate::error::{CadaError, Result};
use crate::model::CadaModel;
use crate::numerics::{kl_div_rows, no_grad, Tensor};
use crate::scalar::Scalar;
use crate::textproc::TokenSequence;

const NORM_EPS: f64 = 1e-12;

/// `[B_img, B_txt]` cosine similarities between rows of `v` and rows of `t`.
pub fn cosine_similarity<T: Scalar>(v: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    let eps = T::lit(NORM_EPS);
    v.l2_normalize(eps).matmul_nt(&t.l2_normalize(eps))
}

/// Row-stochastic target: uniform over the columns that share the row's identity.
pub fn identity_targets<T: Scalar>(row_ids: &[usize], col_ids: &[usize]) -> Result<Vec<T>> {
    let mut q = vec![T::zero(); row_ids.len() * col_ids.len()];
    for (i, &a) in row_ids.iter().enumerate() {
        let pos: Vec<usize> = (0..col_ids.len()).filter(|&j| col_ids[j] == a).collect();
        if pos.is_empty() {
            return Err(CadaError::Batch(format!("row {i} (identity {a}) has no positive column")));
        }
        let w = T::one() / T::lit(pos.len() as f64);
        for j in pos {
            q[i * col_ids.len() + j] = w;
        }
    }
    Ok(q)
}

/// Normalised distribution fitting loss over a square similarity matrix whose
/// rows are images and columns texts.
pub fn ndf_loss<T: Scalar>(sim: &Tensor<T>, image_ids: &[usize], text_ids: &[usize], tau: f64, eps: f64) -> Result<Tensor<T>> {
    let &[n_img, n_txt] = sim.shape() else {
        return Err(CadaError::Dimension(format!("similarity must be a matrix, got {:?}", sim.shape())));
    };
    if n_img != image_ids.len() || n_txt != text_ids.len() || n_img != n_txt {
        return Err(CadaError::Dimension(format!(
            "similarity {:?} with {} image and {} text labels",
            sim.shape(),
            image_ids.len(),
            text_ids.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(CadaError::Validation(format!("temperature {tau} must be positive")));
    }
    let eps = T::lit(eps);
    let logits = sim.scale(T::lit(1.0 / tau));
    let q_i2t = Tensor::new(identity_targets(image_ids, text_ids)?, &[n_img, n_txt])?;
    let p_i2t = logits.softmax(1)?;
    let i2t = kl_div_rows(&p_i2t, &q_i2t, eps)?.add(&kl_div_rows(&q_i2t, &p_i2t, eps)?)?;

    let q_t2i = Tensor::new(identity_targets(text_ids, image_ids)?, &[n_txt, n_img])?;
    let p_t2i = logits.transpose2d()?.softmax(1)?;
    let t2i = kl_div_rows(&p_t2i, &q_t2i, eps)?.add(&kl_div_rows(&q_t2i, &p_t2i, eps)?)?;
    Ok(i2t.sum().add(&t2i.sum())?.scale(T::lit(1.0 / n_img as f64)))
}

/// Per image the hardest different-identity text and per text the hardest
/// different-identity image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegatives {
    pub neg_text: Vec<usize>,
    pub neg_image: Vec<usize>,
}

/// Ties go to the lowest index.
pub fn select_hard_negatives<T: Scalar>(sim: &[T], n: usize, identities: &[usize]) -> Result<HardNegatives> {
    if sim.len() != n * n || identities.len() != n {
        return Err(CadaError::Dimension(format!("{} similarities and {} labels for n = {n}", sim.len(), identities.len())));
    }
    let argmax = |cands: &mut dyn Iterator<Item = (usize, T)>| -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (j, s) in cands {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        best.map(|b| b.0)
    };
    let mut neg_text = Vec::with_capacity(n);
    let mut neg_image = Vec::with_capacity(n);
    for a in 0..n {
        let mut row = (0..n).filter(|&j| identities[j] != identities[a]).map(|j| (j, sim[a * n + j]));
        neg_text.push(argmax(&mut row).ok_or_else(|| {
            CadaError::Batch(format!("image {a} has no different-identity text in the batch"))
        })?);
        let mut col = (0..n).filter(|&i| identities[i] != identities[a]).map(|i| (i, sim[i * n + a]));
        neg_image.push(argmax(&mut col).ok_or_else(|| {
            CadaError::Batch(format!("text {a} has no different-identity image in the batch"))
        })?);
    }
    Ok(HardNegatives { neg_text, neg_image })
}

/// Number of windows `κ = floor((M - p) / r) + 1`.
pub fn group_count(max_len: usize, p: usize, r: usize) -> Result<usize> {
    if p == 0 || r == 0 {
        return Err(CadaError::Config(format!("group size {p} and stride {r} must be positive")));
    }
    if p > max_len {
        return Err(CadaError::Config(format!("group size {p} exceeds sequence length {max_len}")));
    }
    Ok((max_len - p) / r + 1)
}

/// Token-row windows `[(i-1)·r, (i-1)·r + p)` for `i = 1..=κ`.
pub fn group_windows(max_len: usize, p: usize, r: usize) -> Result<Vec<(usize, usize)>> {
    let k = group_count(max_len, p, r)?;
    Ok((0..k).map(|i| (i * r, i * r + p)).collect())
}

/// `[R, κ+1, D]` group representations of decoder output `[R, M, D]`;
/// group 0 is the `[ENC]` row itself.
pub fn group_features<T: Scalar>(h: &Tensor<T>, p: usize, r: usize) -> Result<Tensor<T>> {
    let &[_, m, _] = h.shape() else {
        return Err(CadaError::Dimension(format!("decoder output must be [R, M, D], got {:?}", h.shape())));
    };
    let mut windows = vec![(0, 1)];
    windows.extend(group_windows(m, p, r)?);
    h.window_mean(&windows)
}

/// Binary cross-entropy over `[3P, G, 2]` match logits laid out as P positive
/// pairs, then P (image, hard negative text), then P (hard negative image,
/// text). Column 0 is "match".
pub fn atp_loss<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[rows, g, 2] = logits.shape() else {
        return Err(CadaError::Dimension(format!("match logits must be [3P, G, 2], got {:?}", logits.shape())));
    };
    if rows == 0 || rows % 3 != 0 {
        return Err(CadaError::Dimension(format!("match logits have {rows} rows, not a multiple of 3")));
    }
    let p = rows / 3;
    let target: Vec<usize> = (0..rows * g).map(|i| if i < p * g { 0 } else { 1 }).collect();
    let logp = logits.log_softmax(2)?.reshape(&[rows * g, 2])?.gather_last(&target)?;
    Ok(logp.sum().scale(T::lit(-1.0 / (p * g) as f64)))
}

/// Cross-entropy of masked-token logits `[K, Voc]`, averaged over the masks
/// of each pair and then over pairs that have at least one mask.
/// `pair[k]` names the pair mask `k` belongs to.
pub fn ara_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], pair: &[usize]) -> Result<Tensor<T>> {
    let k = labels.len();
    if pair.len() != k || logits.ndim() != 2 || logits.shape()[0] != k {
        return Err(CadaError::Dimension(format!(
            "mam logits {:?} for {k} labels and {} pair indices",
            logits.shape(),
            pair.len()
        )));
    }
    let n_pairs = pair.iter().max().map_or(0, |m| m + 1);
    let mut per_pair = vec![0usize; n_pairs];
    for &p in pair {
        per_pair[p] += 1;
    }
    let active = per_pair.iter().filter(|&&c| c > 0).count() as f64;
    let w: Vec<T> = pair.iter().map(|&p| T::lit(-1.0 / (per_pair[p] as f64 * active))).collect();
    let logp = logits.log_softmax(1)?.gather_last(labels)?;
    Ok(logp.mul(&Tensor::new(w, &[k])?)?.sum())
}

/// Per-term values of one batch. Disabled terms are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ndf: f64,
    pub atp: f64,
    pub ara: f64,
    pub total: f64,
    /// No sample in the batch had a masked attribute.
    pub ara_empty: bool,
}

/// Everything the combined objective computed, for logging and oracles.
#[derive(Debug, Clone)]
pub struct CadaForward<T: Scalar> {
    pub total: Tensor<T>,
    pub ndf: Option<Tensor<T>>,
    pub atp: Option<Tensor<T>>,
    pub ara: Option<Tensor<T>>,
    pub breakdown: LossBreakdown,
    /// Row-major `[N_z, N_z]` cosine similarities (images × texts).
    pub sim: Vec<T>,
    pub negatives: HardNegatives,
    /// `[3 N_z, κ+1, 2]` match logits when ATP is enabled.
    pub match_logits: Option<Vec<T>>,
    /// `[K, Voc]` masked-token logits with labels and owning pair.
    pub mam_logits: Option<Vec<T>>,
    pub mam_labels: Vec<usize>,
    pub mam_pair: Vec<usize>,
}

/// Full forward pass of the training objective `λ·NDF + ATP + ARA`.
pub fn cada_forward<T: Scalar>(model: &CadaModel<T>, batch: &PairBatch, cfg: &LossConfig) -> Result<CadaForward<T>> {
    let n = batch.len();
    if n < 2 {
        return Err(CadaError::Batch(format!("batch of {n} pairs cannot supply hard negatives")));
    }
    let images: Vec<&[f32]> = batch.images.iter().map(Vec::as_slice).collect();
    let img = model.encode_images(&images)?;
    let cls_texts: Vec<&TokenSequence> = batch.texts.iter().collect();
    let txt = model.encode_texts(&cls_texts)?;
    let (v, t) = model.project_global(&img.cls()?, &txt.cls()?)?;
    let sim = cosine_similarity(&v, &t)?;
    let sim_vals = sim.to_vec();

    let ndf = if cfg.ndf {
        Some(ndf_loss(&sim, &batch.identities, &batch.identities, cfg.tau, cfg.kl_eps)?)
    } else {
        None
    };
    let negatives = no_grad(|| select_hard_negatives(&sim_vals, n, &batch.identities))?;

    let mut dec_texts: Vec<&TokenSequence> = Vec::new();
    let mut dec_images: Vec<usize> = Vec::new();
    if cfg.atp {
        for a in 0..n {
            dec_texts.push(&batch.dec_texts[a]);
            dec_images.push(a);
        }
        for a in 0..n {
            dec_texts.push(&batch.dec_texts[negatives.neg_text[a]]);
            dec_images.push(a);
        }
        for b in 0..n {
            dec_texts.push(&batch.dec_texts[b]);
            dec_images.push(negatives.neg_image[b]);
        }
    }
    let atp_rows = dec_texts.len();
    let mut mam_rows = Vec::new();
    let mut mam_labels = Vec::new();
    let mut mam_pair = Vec::new();
    if cfg.ara {
        let m = model.config.max_len;
        for (a, masked) in batch.masked.iter().enumerate() {
            if masked.num_masked() == 0 {
                continue;
            }
            let row = dec_texts.len();
            dec_texts.push(&batch.masked_texts[a]);
            dec_images.push(a);
            for (&p, &l) in masked.mask_positions.iter().zip(&masked.labels) {
                mam_rows.push(row * m + p);
                mam_labels.push(l);
                mam_pair.push(a);
            }
        }
    }

    let (mut atp, mut ara, mut match_logits, mut mam_logits) = (None, None, None, None);
    if !dec_texts.is_empty() {
        let dec = model.decode(&dec_texts, &img, &dec_images)?;
        let h = dec.tokens;
        let &[rows, m, d] = h.shape() else { unreachable!() };
        if atp_rows > 0 {
            let hp = if rows == atp_rows { h.clone() } else { h.take_rows(&(0..atp_rows).collect::<Vec<_>>())? };
            let logits = model.match_logits(&group_features(&hp, cfg.group_size, cfg.group_stride)?)?;
            match_logits = Some(logits.to_vec());
            atp = Some(atp_loss(&logits)?);
        }
        if !mam_rows.is_empty() {
            let hm = h.reshape(&[rows * m, d])?.take_rows(&mam_rows)?;
            let logits = model.mam_logits(&hm)?;
            mam_logits = Some(logits.to_vec());
            ara = Some(ara_loss(&logits, &mam_labels, &mam_pair)?);
        }
    }

    let mut total = Tensor::scalar(T::zero());
    let mut breakdown = LossBreakdown { ara_empty: cfg.ara && mam_rows.is_empty(), ..Default::default() };
    if let Some(l) = &ndf {
        breakdown.ndf = l.item().to_f64_lossy();
        total = total.add(&l.scale(T::lit(cfg.lambda)))?;
    }
    if let Some(l) = &atp {
        breakdown.atp = l.item().to_f64_lossy();
        total = total.add(l)?;
    }
    if let Some(l) = &ara {
        breakdown.ara = l.item().to_f64_lossy();
        total = total.add(l)?;
    }
    breakdown.total = total.item().to_f64_lossy();
    Ok(CadaForward {
        total,
        ndf,
        atp,
        ara,
        breakdown,
        sim: sim_vals,
        negatives,
        match_logits,
        mam_logits,
        mam_labels,
        mam_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn ndf_single_pair_is_zero() {
        let sim = Tensor::new(vec![0.3f64], &[1, 1]).unwrap();
        assert!(ndf_loss(&sim, &[0], &[0], 0.02, 1e-8).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn ndf_two_pair_closed_form() {
        let sim = Tensor::new(vec![1.0f64, -1.0, -1.0, 1.0], &[2, 2]).unwrap();
        let got = ndf_loss(&sim, &[0, 1], &[0, 1], 1.0, 1e-8).unwrap().item();
        let eps = 1e-8;
        let (a, b) = (sig(2.0), sig(-2.0));
        let fwd = a * ((a + eps) / (1.0 + eps)).ln() + b * ((b + eps) / eps).ln();
        let bwd = ((1.0 + eps) / (a + eps)).ln();
        // four rows of equal loss over N_z = 2
        let want = 4.0 * (fwd + bwd) / 2.0;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ndf_zero_positive_row_is_batch_error() {
        let sim = Tensor::new(vec![1.0f64, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert!(matches!(ndf_loss(&sim, &[0, 1], &[2, 1], 1.0, 1e-8), Err(CadaError::Batch(_))));
    }

    #[test]
    fn hard_negative_examples() {
        let sim = [0.9f64, 0.5, 0.4, 0.1, 0.9, 0.2, 0.3, 0.8, 0.7];
        let h = select_hard_negatives(&sim, 3, &[0, 1, 2]).unwrap();
        assert_eq!(h.neg_text[0], 1);
        let flat = [1.0f64, 0.2, 0.2, 0.2, 1.0, 0.2, 0.2, 0.2, 1.0];
        let h = select_hard_negatives(&flat, 3, &[0, 1, 2]).unwrap();
        assert_eq!(h.neg_text, vec![1, 0, 0]);
        assert_eq!(h.neg_image, vec![1, 0, 0]);
        assert!(matches!(select_hard_negatives(&flat, 3, &[4, 4, 4]), Err(CadaError::Batch(_))));
    }

    #[test]
    fn grouping_counts() {
        for (p, r, k) in [(36, 36, 2), (36, 18, 3), (24, 24, 3), (48, 24, 2), (72, 72, 1)] {
            assert_eq!(group_count(72, p, r).unwrap(), k, "p={p} r={r}");
        }
        assert_eq!(group_windows(24, 24, 5).unwrap(), vec![(0, 24)]);
        assert!(matches!(group_count(24, 25, 1), Err(CadaError::Config(_))));
    }

    #[test]
    fn full_window_group_is_mean_of_all_rows() {
        let h = Tensor::new((0..12).map(|x| x as f64).collect(), &[1, 4, 3]).unwrap();
        let g = group_features(&h, 4, 9).unwrap();
        assert_eq!(g.shape(), [1, 2, 3]);
        assert_eq!(g.to_vec(), vec![0.0, 1.0, 2.0, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn atp_closed_forms() {
        let big = 60.0;
        // confident and right: positive rows say match, negatives say mismatch
        let mut v = Vec::new();
        for row in 0..3 {
            for _ in 0..2 {
                v.extend(if row == 0 { [big, -big] } else { [-big, big] });
            }
        }
        let right = Tensor::new(v, &[3, 2, 2]).unwrap();
        assert!(atp_loss(&right).unwrap().item() < 1e-12);
        let half = Tensor::new(vec![0.0f64; 12], &[3, 2, 2]).unwrap();
        assert!((atp_loss(&half).unwrap().item() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ara_closed_forms() {
        let voc = 200;
        let uniform = Tensor::new(vec![0.0f64; 3 * voc], &[3, voc]).unwrap();
        let l = ara_loss(&uniform, &[5, 6, 7], &[0, 0, 2]).unwrap().item();
        assert!((l - (voc as f64).ln()).abs() < 1e-12);
        let mut v = vec![-80.0f64; 2 * voc];
        v[5] = 80.0;
        v[voc + 9] = 80.0;
        let sure = Tensor::new(v, &[2, voc]).unwrap();
        assert!(ara_loss(&sure, &[5, 9], &[0, 1]).unwrap().item() < 1e-12);
    }
}
