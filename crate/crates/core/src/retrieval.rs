//! Two-stage text-to-image retrieval and its metrics.
//!
//! The global stage ranks the gallery by cosine similarity `S_G` of the
//! projected class tokens. The local stage sends each query's top-η
//! candidates through the decoder and adds the `[ENC]` match probability
//! `S_L`; the sum is used as is, even though the two scores live on
//! different ranges.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{CadaError, Result};
use crate::losses::cosine_similarity;
use crate::model::{CadaModel, EncodedImage};
use crate::numerics::{no_grad, Tensor};
use crate::scalar::Scalar;
use crate::textproc::{mask_attributes, tokenize, tokenize_with_attributes, Leading, TokenSequence};

const ENCODE_CHUNK: usize = 64;

/// Encoded gallery: unit-norm projected features plus the image token cache
/// the decoder needs for reranking.
#[derive(Debug, Clone)]
pub struct GalleryIndex<T: Scalar> {
    /// Row-major `[G, d]`, unit norm.
    pub features: Vec<T>,
    pub dim: usize,
    pub identities: Vec<usize>,
    pub tokens: EncodedImage<T>,
}

impl<T: Scalar> GalleryIndex<T> {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn build(model: &CadaModel<T>, images: &[&[f32]], identities: &[usize]) -> Result<Self> {
        if images.is_empty() {
            return Err(CadaError::Validation("empty gallery".into()));
        }
        if images.len() != identities.len() {
            return Err(CadaError::Dimension(format!("{} images with {} identities", images.len(), identities.len())));
        }
        no_grad(|| {
            let mut features = Vec::new();
            let mut tokens = Vec::new();
            let mut shape = Vec::new();
            for chunk in images.chunks(ENCODE_CHUNK) {
                let enc = model.encode_images(chunk)?;
                let v = model.w_v.forward(&enc.cls()?)?.l2_normalize(T::lit(1e-12));
                features.extend(v.to_vec());
                tokens.extend(enc.tokens.to_vec());
                shape = enc.tokens.shape().to_vec();
            }
            shape[0] = images.len();
            let dim = features.len() / images.len();
            Ok(GalleryIndex {
                features,
                dim,
                identities: identities.to_vec(),
                tokens: EncodedImage { tokens: Tensor::new(tokens, &shape)? },
            })
        })
    }
}

/// Queries as both encoder (`[CLS]`) and decoder (`[ENC]`) token sequences.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub texts: Vec<TokenSequence>,
    pub dec_texts: Vec<TokenSequence>,
    pub identities: Vec<usize>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Ranking of the whole gallery for one query. Score vectors are indexed by
/// gallery position.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub identity: usize,
    /// Gallery indices, best first.
    pub order: Vec<usize>,
    pub global: Vec<f64>,
    /// `S_L` for reranked candidates.
    pub local: Vec<Option<f64>>,
    pub final_scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl QueryRanking {
    /// 1-based rank of the first relevant item.
    pub fn first_relevant_rank(&self) -> Option<usize> {
        self.order.iter().position(|&g| self.relevant[g]).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
    /// Number of (image, text) pairs sent through the decoder.
    pub decoder_calls: usize,
}

/// Descending by score, ties by ascending gallery index.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Global-stage ranking from a row-major `[Q, G]` score matrix.
pub fn rank_from_scores(scores: &[f64], query_ids: &[usize], gallery_ids: &[usize]) -> Result<RankingResult> {
    let (q, g) = (query_ids.len(), gallery_ids.len());
    if g == 0 {
        return Err(CadaError::Validation("empty gallery".into()));
    }
    if scores.len() != q * g {
        return Err(CadaError::Dimension(format!("{} scores for {q} queries and {g} gallery items", scores.len())));
    }
    let queries = (0..q)
        .map(|i| {
            let row = scores[i * g..(i + 1) * g].to_vec();
            QueryRanking {
                identity: query_ids[i],
                order: order_by_score(&row),
                local: vec![None; g],
                final_scores: row.clone(),
                global: row,
                relevant: gallery_ids.iter().map(|&id| id == query_ids[i]).collect(),
            }
        })
        .collect();
    Ok(RankingResult { queries, decoder_calls: 0 })
}

/// Global stage: `S_G = cos(t̃, ṽ)` for every query and gallery image.
pub fn global_rank<T: Scalar>(model: &CadaModel<T>, queries: &QuerySet, gallery: &GalleryIndex<T>) -> Result<RankingResult> {
    if gallery.is_empty() {
        return Err(CadaError::Validation("empty gallery".into()));
    }
    let g = gallery.len();
    let v = Tensor::new(gallery.features.clone(), &[g, gallery.dim])?;
    let mut scores = Vec::with_capacity(queries.len() * g);
    no_grad(|| -> Result<()> {
        for chunk in queries.texts.chunks(ENCODE_CHUNK) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let t = model.w_t.forward(&model.encode_texts(&refs)?.cls()?)?;
            scores.extend(cosine_similarity(&t, &v)?.to_vec().into_iter().map(|x| x.to_f64_lossy()));
        }
        Ok(())
    })?;
    rank_from_scores(&scores, &queries.identities, &gallery.identities)
}

/// Reranks each query's top-η candidates with `local_scores(query, candidates)`,
/// which must return one `S_L` per candidate. `η` is clamped to the gallery size.
pub fn rerank_with<F>(result: &RankingResult, eta: usize, mut local_scores: F) -> Result<RankingResult>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    let mut out = result.clone();
    if eta == 0 {
        return Ok(out);
    }
    for (qi, q) in out.queries.iter_mut().enumerate() {
        let top: Vec<usize> = q.order[..eta.min(q.order.len())].to_vec();
        let s_l = local_scores(qi, &top)?;
        if s_l.len() != top.len() {
            return Err(CadaError::Dimension(format!("{} local scores for {} candidates", s_l.len(), top.len())));
        }
        out.decoder_calls += top.len();
        for (&gi, &s) in top.iter().zip(&s_l) {
            q.local[gi] = Some(s);
            q.final_scores[gi] = q.global[gi] + s;
        }
        q.order = order_by_score(&q.final_scores);
    }
    Ok(out)
}

/// `S_L` = `[ENC]` match probability of each (candidate image, query) pair.
pub fn match_probabilities<T: Scalar>(
    model: &CadaModel<T>,
    query: &TokenSequence,
    gallery: &GalleryIndex<T>,
    candidates: &[usize],
) -> Result<Vec<f64>> {
    no_grad(|| {
        let texts = vec![query; candidates.len()];
        let dec = model.decode(&texts, &gallery.tokens, candidates)?;
        let p = model.match_logits(&dec.enc()?)?.softmax(1)?;
        Ok(p.to_vec().chunks(2).map(|r| r[0].to_f64_lossy()).collect())
    })
}

/// Local stage on top of a global ranking.
pub fn local_rerank<T: Scalar>(
    result: &RankingResult,
    eta: usize,
    model: &CadaModel<T>,
    queries: &QuerySet,
    gallery: &GalleryIndex<T>,
) -> Result<RankingResult> {
    rerank_with(result, eta, |qi, cands| match_probabilities(model, &queries.dec_texts[qi], gallery, cands))
}

fn check_relevant(result: &RankingResult) -> Result<()> {
    for (i, q) in result.queries.iter().enumerate() {
        if !q.relevant.iter().any(|&r| r) {
            return Err(CadaError::Evaluation(format!("query {i} (identity {}) has no relevant gallery item", q.identity)));
        }
    }
    if result.queries.is_empty() {
        return Err(CadaError::Evaluation("no queries".into()));
    }
    Ok(())
}

/// Fraction of queries with a relevant item among the first `k`.
pub fn rank_k(result: &RankingResult, k: usize) -> Result<f64> {
    check_relevant(result)?;
    let hits = result.queries.iter().filter(|q| q.order.iter().take(k).any(|&g| q.relevant[g])).count();
    Ok(hits as f64 / result.queries.len() as f64)
}

/// Mean over queries of the average precision at each relevant position.
pub fn mean_ap(result: &RankingResult) -> Result<f64> {
    check_relevant(result)?;
    let mut total = 0.0;
    for q in &result.queries {
        let (mut seen, mut sum) = (0usize, 0.0);
        for (pos, &g) in q.order.iter().enumerate() {
            if q.relevant[g] {
                seen += 1;
                sum += seen as f64 / (pos + 1) as f64;
            }
        }
        total += sum / seen as f64;
    }
    Ok(total / result.queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Global,
    Local,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Global => "global",
            Protocol::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// η actually used (0 for the global protocol, clamped to the gallery).
    pub eta: usize,
    pub num_queries: usize,
    pub gallery_size: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub decoder_calls: usize,
    pub ranking: RankingResult,
}

impl EvalReport {
    pub fn from_ranking(protocol: Protocol, eta: usize, gallery_size: usize, ranking: RankingResult) -> Result<Self> {
        Ok(EvalReport {
            protocol,
            eta,
            num_queries: ranking.queries.len(),
            gallery_size,
            rank1: rank_k(&ranking, 1)?,
            rank5: rank_k(&ranking, 5)?,
            rank10: rank_k(&ranking, 10)?,
            map: mean_ap(&ranking)?,
            decoder_calls: ranking.decoder_calls,
            ranking,
        })
    }

    /// Per-query top-10 rows followed by a summary block. Wall time is not
    /// part of the report so that reruns compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query,identity,first_relevant_rank,top10\n");
        for (i, q) in self.ranking.queries.iter().enumerate() {
            let top: Vec<String> = q
                .order
                .iter()
                .take(10)
                .map(|&g| format!("{g}:{:.6}", q.final_scores[g]))
                .collect();
            let rank = q.first_relevant_rank().map_or(String::from("none"), |r| r.to_string());
            let _ = writeln!(s, "{i},{},{rank},{}", q.identity, top.join(" "));
        }
        s.push_str("\nmetric,value\n");
        let _ = writeln!(s, "protocol,{}", self.protocol.name());
        let _ = writeln!(s, "eta,{}", self.eta);
        let _ = writeln!(s, "queries,{}", self.num_queries);
        let _ = writeln!(s, "gallery,{}", self.gallery_size);
        let _ = writeln!(s, "rank1,{:.6}", self.rank1);
        let _ = writeln!(s, "rank5,{:.6}", self.rank5);
        let _ = writeln!(s, "rank10,{:.6}", self.rank10);
        let _ = writeln!(s, "map,{:.6}", self.map);
        let _ = writeln!(s, "decoder_calls,{}", self.decoder_calls);
        s
    }
}

/// Test-split gallery (one entry per image) and queries (one per caption).
pub fn test_split<T: Scalar>(model: &CadaModel<T>, data: &Dataset) -> Result<(QuerySet, GalleryIndex<T>)> {
    let img_idx = data.split_images(Split::Test);
    if img_idx.is_empty() {
        return Err(CadaError::Validation("dataset has no test images".into()));
    }
    let images: Vec<&[f32]> = img_idx.iter().map(|&i| data.images[i].data.as_slice()).collect();
    let ids: Vec<usize> = img_idx.iter().map(|&i| data.images[i].id).collect();
    let gallery = GalleryIndex::build(model, &images, &ids)?;
    let max_len = model.config.max_len;
    let mut q = QuerySet { texts: Vec::new(), dec_texts: Vec::new(), identities: Vec::new() };
    for r in data.split_records(Split::Test) {
        let rec = &data.records[r];
        let t = tokenize(&rec.caption, &data.vocab, max_len, Leading::Cls)?;
        q.dec_texts.push(t.with_leading(Leading::Enc));
        q.texts.push(t);
        q.identities.push(rec.id);
    }
    Ok((q, gallery))
}

/// Full evaluation on the test split.
pub fn evaluate<T: Scalar>(model: &CadaModel<T>, data: &Dataset, protocol: Protocol, eta: usize) -> Result<EvalReport> {
    let (queries, gallery) = test_split(model, data)?;
    evaluate_on(model, &queries, &gallery, protocol, eta)
}

pub fn evaluate_on<T: Scalar>(
    model: &CadaModel<T>,
    queries: &QuerySet,
    gallery: &GalleryIndex<T>,
    protocol: Protocol,
    eta: usize,
) -> Result<EvalReport> {
    let global = global_rank(model, queries, gallery)?;
    let (ranking, eta) = match protocol {
        Protocol::Global => (global, 0),
        Protocol::Local => {
            let eta = eta.min(gallery.len());
            (local_rerank(&global, eta, model, queries, gallery)?, eta)
        }
    };
    EvalReport::from_ranking(protocol, eta, gallery.len(), ranking)
}

/// Masked-attribute prediction on held-out captions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MamReport {
    pub captions: usize,
    pub masked_tokens: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Masks every attribute phrase of each test caption, decodes it against its
/// own image and scores the top-1 vocabulary prediction at each mask.
pub fn mam_accuracy<T: Scalar>(model: &CadaModel<T>, data: &Dataset) -> Result<MamReport> {
    let records = data.split_records(Split::Test);
    let max_len = model.config.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut report = MamReport { captions: 0, masked_tokens: 0, correct: 0, accuracy: 0.0 };
    no_grad(|| -> Result<()> {
        for chunk in records.chunks(ENCODE_CHUNK) {
            let mut texts = Vec::new();
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for &r in chunk {
                let rec = &data.records[r];
                let t = tokenize_with_attributes(&rec.caption, &data.vocab, &data.lexicon, max_len, Leading::Enc)?;
                let masked = mask_attributes(&t, &t.attribute_spans, 1.0, &mut rng)?;
                if masked.num_masked() == 0 {
                    continue;
                }
                for (&p, &l) in masked.mask_positions.iter().zip(&masked.labels) {
                    rows.push(texts.len() * max_len + p);
                    labels.push(l);
                }
                let mut seq = t;
                seq.ids = masked.ids;
                texts.push((seq, data.record_image[r]));
            }
            if texts.is_empty() {
                continue;
            }
            let images: Vec<&[f32]> = texts.iter().map(|(_, i)| data.images[*i].data.as_slice()).collect();
            let enc = model.encode_images(&images)?;
            let seqs: Vec<&TokenSequence> = texts.iter().map(|(s, _)| s).collect();
            let idx: Vec<usize> = (0..texts.len()).collect();
            let h = model.decode(&seqs, &enc, &idx)?.tokens;
            let d = h.last_dim();
            let logits = model.mam_logits(&h.reshape(&[texts.len() * max_len, d])?.take_rows(&rows)?)?;
            let voc = logits.last_dim();
            let v = logits.data();
            for (k, &label) in labels.iter().enumerate() {
                let row = &v[k * voc..(k + 1) * voc];
                let best = (0..voc).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                report.correct += usize::from(best == label);
            }
            report.captions += texts.len();
            report.masked_tokens += labels.len();
        }
        Ok(())
    })?;
    if report.masked_tokens == 0 {
        return Err(CadaError::Evaluation("no test caption has an attribute phrase".into()));
    }
    report.accuracy = report.correct as f64 / report.masked_tokens as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(orders: &[(&[usize], &[bool])]) -> RankingResult {
        RankingResult {
            queries: orders
                .iter()
                .map(|(o, r)| QueryRanking {
                    identity: 0,
                    order: o.to_vec(),
                    global: vec![0.0; o.len()],
                    local: vec![None; o.len()],
                    final_scores: vec![0.0; o.len()],
                    relevant: r.to_vec(),
                })
                .collect(),
            decoder_calls: 0,
        }
    }

    #[test]
    fn rank_k_examples() {
        let always = result(&[(&[0, 1], &[true, false]), (&[1, 0], &[false, true])]);
        assert_eq!(rank_k(&always, 1).unwrap(), 1.0);
        let mut rel2 = vec![false; 10];
        rel2[1] = true;
        let mut rel7 = vec![false; 10];
        rel7[6] = true;
        let order: Vec<usize> = (0..10).collect();
        let r = result(&[(&order, &rel2), (&order, &rel7)]);
        assert_eq!(rank_k(&r, 5).unwrap(), 0.5);
    }

    #[test]
    fn map_examples() {
        let r = result(&[(&[0, 1, 2], &[true, false, false])]);
        assert_eq!(mean_ap(&r).unwrap(), 1.0);
        let r = result(&[(&[0, 1, 2], &[true, false, true])]);
        assert!((mean_ap(&r).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        let none = result(&[(&[0, 1], &[false, false])]);
        assert!(matches!(mean_ap(&none), Err(CadaError::Evaluation(_))));
        assert!(rank_k(&none, 1).unwrap_err().to_string().contains("query 0"));
    }

    #[test]
    fn ties_break_by_index_and_single_gallery_ranks_first() {
        assert_eq!(order_by_score(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
        let r = rank_from_scores(&[0.1], &[3], &[3]).unwrap();
        assert_eq!(r.queries[0].order, vec![0]);
        assert!(rank_from_scores(&[], &[3], &[]).is_err());
    }

    #[test]
    fn eta_zero_is_identity_and_calls_are_counted() {
        let scores = [0.3, 0.1, 0.7, 0.2, 0.9, 0.0, 0.4, 0.5];
        let g = rank_from_scores(&scores, &[0, 1], &[0, 1, 0, 1]).unwrap();
        assert_eq!(rerank_with(&g, 0, |_, _| unreachable!()).unwrap(), g);
        let l = rerank_with(&g, 2, |_, c| Ok(vec![1.0; c.len()])).unwrap();
        assert_eq!(l.decoder_calls, 4);
        let all = rerank_with(&g, 100, |_, c| Ok(vec![0.5; c.len()])).unwrap();
        assert_eq!(all.decoder_calls, 8);
        // the bottom of the list keeps its global order
        let r = rerank_with(&g, 2, |_, c| Ok((0..c.len()).map(|i| i as f64).collect())).unwrap();
        for (a, b) in g.queries.iter().zip(&r.queries) {
            let rest_g: Vec<_> = a.order[2..].to_vec();
            let rest_r: Vec<_> = b.order.iter().filter(|x| rest_g.contains(x)).copied().collect();
            assert_eq!(rest_g, rest_r);
        }
    }
}
