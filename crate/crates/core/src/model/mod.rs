//! Image encoder, text encoder, parameter-shared cross-modal decoder and the
//! projection / classification heads.

pub mod layers;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, CadaError, Result};
use crate::numerics::{embedding, Checkpoint, NamedArray, Parameter, Tensor};
use crate::scalar::Scalar;
use crate::textproc::{Leading, TokenSequence};

pub use layers::{DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};

/// `[B, N+1, d_v]`; row 0 of each image is `[CLS]_v`.
#[derive(Debug, Clone)]
pub struct EncodedImage<T: Scalar> {
    pub tokens: Tensor<T>,
}

/// `[B, M_max, d_t]` plus the attention key mask (`true` = real token).
#[derive(Debug, Clone)]
pub struct EncodedText<T: Scalar> {
    pub tokens: Tensor<T>,
    pub key_mask: Vec<bool>,
}

/// `[R, M_max, d_t]`; row 0 of each sequence is `h_enc`.
#[derive(Debug, Clone)]
pub struct DecoderOutput<T: Scalar> {
    pub tokens: Tensor<T>,
}

fn first_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, _, d] = x.shape() else {
        return Err(dim_err!("expected [B, L, D], got {:?}", x.shape()));
    };
    x.window_mean(&[(0, 1)])?.reshape(&[b, d])
}

impl<T: Scalar> EncodedImage<T> {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// `[B, d_v]`.
    pub fn cls(&self) -> Result<Tensor<T>> {
        first_rows(&self.tokens)
    }
}

impl<T: Scalar> EncodedText<T> {
    /// `[B, d_t]`.
    pub fn cls(&self) -> Result<Tensor<T>> {
        first_rows(&self.tokens)
    }
}

impl<T: Scalar> DecoderOutput<T> {
    /// `[R, d_t]`.
    pub fn enc(&self) -> Result<Tensor<T>> {
        first_rows(&self.tokens)
    }
}

/// Outcome of [`CadaModel::verify_sharing`].
#[derive(Debug, Clone, Default)]
pub struct SharingReport {
    /// Decoder parameters that alias the text encoder.
    pub shared_checked: usize,
    /// Decoder-only parameters.
    pub exclusive_checked: usize,
    pub violations: Vec<String>,
}

impl SharingReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder<T: Scalar> {
    pub patch_embed: Linear<T>,
    pub cls: Parameter<T>,
    pub pos: Parameter<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub ln_f: LayerNorm<T>,
}

/// Token/position embeddings, layers and final norm; used by both the text
/// encoder and (through aliases) the decoder.
#[derive(Debug, Clone)]
pub struct TextStack<T: Scalar> {
    pub tok_embed: Parameter<T>,
    pub pos: Parameter<T>,
    pub ln_f: LayerNorm<T>,
}

#[derive(Debug, Clone)]
pub struct CadaModel<T: Scalar> {
    pub config: ModelConfig,
    pub image: ImageEncoder<T>,
    pub text: TextStack<T>,
    pub text_layers: Vec<EncoderLayer<T>>,
    pub decoder_embed: TextStack<T>,
    pub decoder_layers: Vec<DecoderLayer<T>>,
    /// `W_v`, `[d_v, d]`, no bias.
    pub w_v: Linear<T>,
    /// `W_t`, `[d_t, d]`, no bias.
    pub w_t: Linear<T>,
    /// `FC_φ`: match / mismatch logits; column 0 is "match".
    pub match_head: Linear<T>,
    /// `FC_β`: vocabulary logits.
    pub mam_head: Linear<T>,
}

fn alias_stack<T: Scalar>(s: &TextStack<T>, name: &str) -> TextStack<T> {
    TextStack {
        tok_embed: Parameter::alias(format!("{name}.tok_embed"), &s.tok_embed),
        pos: Parameter::alias(format!("{name}.pos"), &s.pos),
        ln_f: s.ln_f.alias(&format!("{name}.ln_f")),
    }
}

impl<T: Scalar> CadaModel<T> {
    /// Builds a randomly initialised model. `config.vocab_size` must already
    /// be resolved.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let c = config;
        if c.patch == 0 || c.image_size % c.patch != 0 {
            return Err(CadaError::Config(format!("image size {} not divisible by patch {}", c.image_size, c.patch)));
        }
        if c.heads == 0 || c.width_v % c.heads != 0 || c.width_t % c.heads != 0 {
            return Err(CadaError::Config(format!("widths {}/{} not divisible by {} heads", c.width_v, c.width_t, c.heads)));
        }
        if c.vocab_size <= crate::textproc::vocab::NUM_SPECIAL {
            return Err(CadaError::Config(format!("vocabulary size {} is unresolved or too small", c.vocab_size)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let std = c.init_std;
        let n = (c.image_size / c.patch).pow(2);
        let (dv, dt) = (c.width_v, c.width_t);

        let image = ImageEncoder {
            patch_embed: Linear::new(rng, "image.patch_embed", c.patch * c.patch * c.channels, dv, true, std),
            cls: layers::random_param(rng, "image.cls".into(), &[dv], std),
            pos: layers::random_param(rng, "image.pos".into(), &[n + 1, dv], std),
            layers: (0..c.image_layers)
                .map(|i| EncoderLayer::new(rng, &format!("image.layers.{i}"), dv, c.heads, c.ffn_mult, std, c.ln_eps))
                .collect(),
            ln_f: LayerNorm::new("image.ln_f", dv, c.ln_eps),
        };
        let text = TextStack {
            tok_embed: layers::random_param(rng, "text.tok_embed".into(), &[c.vocab_size, dt], std),
            pos: layers::random_param(rng, "text.pos".into(), &[c.max_len, dt], std),
            ln_f: LayerNorm::new("text.ln_f", dt, c.ln_eps),
        };
        let text_layers: Vec<EncoderLayer<T>> = (0..c.text_layers)
            .map(|i| EncoderLayer::new(rng, &format!("text.layers.{i}"), dt, c.heads, c.ffn_mult, std, c.ln_eps))
            .collect();
        let decoder_embed = alias_stack(&text, "decoder");
        let decoder_layers = text_layers
            .iter()
            .enumerate()
            .map(|(i, l)| DecoderLayer {
                shared: l.alias(&format!("decoder.layers.{i}")),
                ln_cross: LayerNorm::new(&format!("decoder.layers.{i}.ln_cross"), dt, c.ln_eps),
                cross: MultiHeadAttention::new(rng, &format!("decoder.layers.{i}.cross"), dt, dv, c.heads, std),
            })
            .collect();
        Ok(CadaModel {
            config: c.clone(),
            image,
            text,
            text_layers,
            decoder_embed,
            decoder_layers,
            w_v: Linear::new(rng, "heads.w_v", dv, c.latent_dim, false, std),
            w_t: Linear::new(rng, "heads.w_t", dt, c.latent_dim, false, std),
            match_head: Linear::new(rng, "heads.match", dt, 2, true, std),
            mam_head: Linear::new(rng, "heads.mam", dt, c.vocab_size, true, std),
        })
    }

    pub fn num_patches(&self) -> usize {
        (self.config.image_size / self.config.patch).pow(2)
    }

    pub fn image_len(&self) -> usize {
        self.config.image_size * self.config.image_size * self.config.channels
    }

    /// Every parameter in a fixed order, aliases included (they carry
    /// `shared_with`).
    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        let im = &self.image;
        im.patch_embed.collect(&mut out);
        out.push(im.cls.clone());
        out.push(im.pos.clone());
        for l in &im.layers {
            l.collect(&mut out);
        }
        im.ln_f.collect(&mut out);
        out.push(self.text.tok_embed.clone());
        out.push(self.text.pos.clone());
        for l in &self.text_layers {
            l.collect(&mut out);
        }
        self.text.ln_f.collect(&mut out);
        out.push(self.decoder_embed.tok_embed.clone());
        out.push(self.decoder_embed.pos.clone());
        for l in &self.decoder_layers {
            l.shared.collect(&mut out);
            l.collect_exclusive(&mut out);
        }
        self.decoder_embed.ln_f.collect(&mut out);
        for h in [&self.w_v, &self.w_t, &self.match_head, &self.mam_head] {
            h.collect(&mut out);
        }
        out
    }

    /// Cuts the storage link between decoder layer `i` and text layer `i`.
    /// Only meant as a negative control for [`verify_sharing`](Self::verify_sharing).
    pub fn unshare_decoder_layer(&mut self, i: usize) -> Result<()> {
        let l = self
            .decoder_layers
            .get_mut(i)
            .ok_or_else(|| CadaError::Validation(format!("no decoder layer {i}")))?;
        l.shared = l.shared.unshared();
        Ok(())
    }

    /// Checks that every decoder self-attention / feed-forward / embedding
    /// parameter is the text encoder's storage and that every cross-attention
    /// parameter is exclusive to the decoder.
    pub fn verify_sharing(&self) -> SharingReport {
        let mut report = SharingReport::default();
        let mut pairs: Vec<(Parameter<T>, Parameter<T>)> = Vec::new();
        let collect_stack = |s: &TextStack<T>| {
            let mut v = vec![s.tok_embed.clone(), s.pos.clone()];
            s.ln_f.collect(&mut v);
            v
        };
        pairs.extend(collect_stack(&self.decoder_embed).into_iter().zip(collect_stack(&self.text)));
        if self.decoder_layers.len() != self.text_layers.len() {
            report
                .violations
                .push(format!("decoder has {} layers, text encoder {}", self.decoder_layers.len(), self.text_layers.len()));
        }
        for (d, t) in self.decoder_layers.iter().zip(&self.text_layers) {
            let (mut dv, mut tv) = (Vec::new(), Vec::new());
            d.shared.collect(&mut dv);
            t.collect(&mut tv);
            pairs.extend(dv.into_iter().zip(tv));
        }
        for (d, t) in &pairs {
            report.shared_checked += 1;
            if !d.shares_storage_with(t) {
                report.violations.push(format!("`{}` does not share storage with `{}`", d.name, t.name));
            }
        }

        let mut owners: HashMap<usize, Vec<String>> = HashMap::new();
        for p in self.parameters() {
            owners.entry(p.tensor.storage_id()).or_default().push(p.name);
        }
        for (i, l) in self.decoder_layers.iter().enumerate() {
            let mut ex = Vec::new();
            l.collect_exclusive(&mut ex);
            for p in ex {
                report.exclusive_checked += 1;
                let names = &owners[&p.tensor.storage_id()];
                if names.len() > 1 {
                    report.violations.push(format!(
                        "decoder layer {i} cross-attention parameter `{}` is shared with {:?}",
                        p.name,
                        names.iter().filter(|n| **n != p.name).collect::<Vec<_>>()
                    ));
                }
            }
        }
        report
    }

    /// Errors with the full mismatch list when sharing is broken.
    pub fn check_sharing(&self) -> Result<SharingReport> {
        let r = self.verify_sharing();
        if r.passed() {
            Ok(r)
        } else {
            Err(CadaError::Sharing(r.violations.join("\n")))
        }
    }

    /// Splits `H×W×C` images into flattened `P×P×C` patches, row-major over
    /// the patch grid.
    fn patchify(&self, images: &[&[f32]]) -> Result<Tensor<T>> {
        let c = &self.config;
        let (s, p, ch) = (c.image_size, c.patch, c.channels);
        let g = s / p;
        let pd = p * p * ch;
        let mut out = Vec::with_capacity(images.len() * g * g * pd);
        for (i, img) in images.iter().enumerate() {
            if img.len() != s * s * ch {
                return Err(dim_err!("image {i} has {} values, expected {s}x{s}x{ch}", img.len()));
            }
            for gy in 0..g {
                for gx in 0..g {
                    for y in gy * p..(gy + 1) * p {
                        let row = (y * s + gx * p) * ch;
                        out.extend(img[row..row + p * ch].iter().map(|&v| T::lit(v as f64)));
                    }
                }
            }
        }
        Tensor::new(out, &[images.len(), g * g, pd])
    }

    pub fn encode_images(&self, images: &[&[f32]]) -> Result<EncodedImage<T>> {
        if images.is_empty() {
            return Err(CadaError::Validation("no images to encode".into()));
        }
        let im = &self.image;
        let x = im.patch_embed.forward(&self.patchify(images)?)?;
        let mut x = x.prepend_token(&im.cls.tensor)?.add(&im.pos.tensor)?;
        for l in &im.layers {
            x = l.forward(&x, None)?;
        }
        Ok(EncodedImage { tokens: im.ln_f.forward(&x)? })
    }

    fn embed(&self, stack: &TextStack<T>, texts: &[&TokenSequence]) -> Result<(Tensor<T>, Vec<bool>)> {
        let l = self.config.max_len;
        let mut ids = Vec::with_capacity(texts.len() * l);
        let mut mask = Vec::with_capacity(texts.len() * l);
        for t in texts {
            if t.ids.len() != l {
                return Err(dim_err!("token sequence of length {} for max_len {l}", t.ids.len()));
            }
            if let Some(&bad) = t.ids.iter().find(|&&i| i >= self.config.vocab_size) {
                return Err(CadaError::Validation(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
            }
            ids.extend_from_slice(&t.ids);
            mask.extend(t.key_mask());
        }
        let x = embedding(&stack.tok_embed.tensor, &ids)?.reshape(&[texts.len(), l, self.config.width_t])?;
        Ok((x.add(&stack.pos.tensor)?, mask))
    }

    /// The text transformer without checking the leading token.
    pub fn text_stack(&self, texts: &[&TokenSequence]) -> Result<EncodedText<T>> {
        if texts.is_empty() {
            return Err(CadaError::Validation("no texts to encode".into()));
        }
        let (mut x, key_mask) = self.embed(&self.text, texts)?;
        for l in &self.text_layers {
            x = l.forward(&x, Some(&key_mask))?;
        }
        Ok(EncodedText { tokens: self.text.ln_f.forward(&x)?, key_mask })
    }

    pub fn encode_texts(&self, texts: &[&TokenSequence]) -> Result<EncodedText<T>> {
        if let Some((i, _)) = texts.iter().enumerate().find(|(_, t)| t.leading() != Some(Leading::Cls)) {
            return Err(CadaError::Validation(format!("text {i} does not start with [CLS]")));
        }
        self.text_stack(texts)
    }

    /// Decodes `texts[r]` against image `image_idx[r]` of `images`.
    pub fn decode(&self, texts: &[&TokenSequence], images: &EncodedImage<T>, image_idx: &[usize]) -> Result<DecoderOutput<T>> {
        if texts.len() != image_idx.len() {
            return Err(dim_err!("decode: {} texts for {} image indices", texts.len(), image_idx.len()));
        }
        if texts.is_empty() {
            return Err(CadaError::Validation("nothing to decode".into()));
        }
        if let Some((i, _)) = texts.iter().enumerate().find(|(_, t)| t.leading() != Some(Leading::Enc)) {
            return Err(CadaError::Validation(format!("decoder text {i} does not start with [ENC]")));
        }
        let (mut x, key_mask) = self.embed(&self.decoder_embed, texts)?;
        for l in &self.decoder_layers {
            // project each image once, then gather per decoded row
            let (k, v) = l.cross.project_kv(&images.tokens)?;
            let kv = (k.take_rows(image_idx)?, v.take_rows(image_idx)?);
            x = l.forward(&x, Some(&key_mask), &kv)?;
        }
        Ok(DecoderOutput { tokens: self.decoder_embed.ln_f.forward(&x)? })
    }

    /// `(ṽ, t̃)` from `[B, d_v]` and `[B, d_t]` class tokens.
    pub fn project_global(&self, v_cls: &Tensor<T>, t_cls: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.w_v.forward(v_cls)?, self.w_t.forward(t_cls)?))
    }

    /// Match / mismatch logits of `[..., d_t]` group features.
    pub fn match_logits(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.match_head.forward(g)
    }

    /// Vocabulary logits of `[K, d_t]` decoder rows.
    pub fn mam_logits(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.mam_head.forward(h)
    }

    /// Canonical tensors (one per storage) plus the alias table.
    pub fn to_checkpoint(&self, config_hash: &str, config_text: &str, step: u64) -> Checkpoint {
        let mut ck = Checkpoint {
            config_hash: config_hash.to_string(),
            config: config_text.to_string(),
            step,
            ..Default::default()
        };
        let mut seen: HashMap<usize, String> = HashMap::new();
        for p in self.parameters() {
            let sid = p.tensor.storage_id();
            if let Some(canon) = seen.get(&sid) {
                ck.aliases.push((p.name.clone(), canon.clone()));
                continue;
            }
            seen.insert(sid, p.name.clone());
            ck.tensors.push(NamedArray {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|x| x.to_f64_lossy() as f32).collect(),
            });
        }
        ck
    }

    /// Copies weights from a checkpoint into this model's storage. Shapes,
    /// names and the alias table must match exactly.
    pub fn load_weights(&self, ck: &Checkpoint) -> Result<()> {
        let own = self.to_checkpoint("", "", 0);
        if own.aliases != ck.aliases {
            return Err(CadaError::Checkpoint("alias table does not match the model's sharing structure".into()));
        }
        let by_name: BTreeMap<&str, &NamedArray> = ck.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let params: HashMap<String, Parameter<T>> =
            self.parameters().into_iter().map(|p| (p.name.clone(), p)).collect();
        for mine in &own.tensors {
            let theirs = by_name
                .get(mine.name.as_str())
                .ok_or_else(|| CadaError::Checkpoint(format!("missing tensor `{}`", mine.name)))?;
            if theirs.shape != mine.shape {
                return Err(CadaError::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    mine.name, theirs.shape, mine.shape
                )));
            }
        }
        for mine in &own.tensors {
            let theirs = by_name[mine.name.as_str()];
            params[&mine.name].tensor.update_data(|w| {
                for (d, &s) in w.iter_mut().zip(&theirs.data) {
                    *d = T::lit(s as f64);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
