//! Transformer building blocks over [`Parameter`]s.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{attention, Parameter, Tensor};
use crate::scalar::Scalar;

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::lit(x);
            }
        })
        .collect()
}

pub(crate) fn param<T: Scalar>(name: String, data: Vec<T>, shape: &[usize]) -> Parameter<T> {
    Parameter::new(name, Tensor::parameter(data, shape).expect("shape matches data"))
}

pub(crate) fn random_param<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    name: String,
    shape: &[usize],
    std: f64,
) -> Parameter<T> {
    let n = shape.iter().product();
    param(name, trunc_normal(rng, n, std), shape)
}

fn zeros_param<T: Scalar>(name: String, shape: &[usize]) -> Parameter<T> {
    param(name, vec![T::zero(); shape.iter().product()], shape)
}

fn alias<T: Scalar>(name: String, of: &Parameter<T>) -> Parameter<T> {
    Parameter::alias(name, of)
}

fn unshare<T: Scalar>(p: &Parameter<T>) -> Parameter<T> {
    Parameter::new(p.name.clone(), p.tensor.deep_clone())
}

/// `x·W + b`, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Option<Parameter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, name: &str, d_in: usize, d_out: usize, bias: bool, std: f64) -> Self {
        Linear {
            w: random_param(rng, format!("{name}.w"), &[d_in, d_out], std),
            b: bias.then(|| zeros_param(format!("{name}.b"), &[d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.w.tensor, self.b.as_ref().map(|b| &b.tensor))
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        out.push(self.w.clone());
        out.extend(self.b.iter().cloned());
    }

    fn alias(&self, name: &str) -> Self {
        Linear {
            w: alias(format!("{name}.w"), &self.w),
            b: self.b.as_ref().map(|b| alias(format!("{name}.b"), b)),
        }
    }

    fn unshared(&self) -> Self {
        Linear { w: unshare(&self.w), b: self.b.as_ref().map(unshare) }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, d: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: param(format!("{name}.gamma"), vec![T::one(); d], &[d]),
            beta: zeros_param(format!("{name}.beta"), &[d]),
            eps: T::lit(eps),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma.tensor, &self.beta.tensor, self.eps)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }

    pub(crate) fn alias(&self, name: &str) -> Self {
        LayerNorm {
            gamma: alias(format!("{name}.gamma"), &self.gamma),
            beta: alias(format!("{name}.beta"), &self.beta),
            eps: self.eps,
        }
    }

    fn unshared(&self) -> Self {
        LayerNorm { gamma: unshare(&self.gamma), beta: unshare(&self.beta), eps: self.eps }
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    /// `d_q` is the query/output width, `d_kv` the width of the attended sequence.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, name: &str, d_q: usize, d_kv: usize, heads: usize, std: f64) -> Self {
        MultiHeadAttention {
            q: Linear::new(rng, &format!("{name}.q"), d_q, d_q, true, std),
            k: Linear::new(rng, &format!("{name}.k"), d_kv, d_q, true, std),
            v: Linear::new(rng, &format!("{name}.v"), d_kv, d_q, true, std),
            o: Linear::new(rng, &format!("{name}.o"), d_q, d_q, true, std),
            heads,
        }
    }

    /// Projected keys and values of `x_kv`.
    pub fn project_kv(&self, x_kv: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.k.forward(x_kv)?, self.v.forward(x_kv)?))
    }

    pub fn attend(&self, x_q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let q = self.q.forward(x_q)?;
        self.o.forward(&attention(&q, k, v, key_mask, self.heads)?)
    }

    pub fn forward(&self, x_q: &Tensor<T>, x_kv: &Tensor<T>, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let (k, v) = self.project_kv(x_kv)?;
        self.attend(x_q, &k, &v, key_mask)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.collect(out);
        }
    }

    fn alias(&self, name: &str) -> Self {
        MultiHeadAttention {
            q: self.q.alias(&format!("{name}.q")),
            k: self.k.alias(&format!("{name}.k")),
            v: self.v.alias(&format!("{name}.v")),
            o: self.o.alias(&format!("{name}.o")),
            heads: self.heads,
        }
    }

    fn unshared(&self) -> Self {
        MultiHeadAttention {
            q: self.q.unshared(),
            k: self.k.unshared(),
            v: self.v.unshared(),
            o: self.o.unshared(),
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, name: &str, d: usize, hidden: usize, std: f64) -> Self {
        FeedForward {
            fc1: Linear::new(rng, &format!("{name}.fc1"), d, hidden, true, std),
            fc2: Linear::new(rng, &format!("{name}.fc2"), hidden, d, true, std),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        self.fc1.collect(out);
        self.fc2.collect(out);
    }
}

/// Pre-norm self-attention block: `x + SA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, name: &str, d: usize, heads: usize, ffn_mult: usize, std: f64, eps: f64) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d, eps),
            attn: MultiHeadAttention::new(rng, &format!("{name}.attn"), d, d, heads, std),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d, eps),
            ffn: FeedForward::new(rng, &format!("{name}.ffn"), d, d * ffn_mult, std),
        }
    }

    pub fn self_attention(&self, x: &Tensor<T>, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let h = self.ln1.forward(x)?;
        x.add(&self.attn.forward(&h, &h, key_mask)?)
    }

    pub fn feed_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&self.ffn.forward(&self.ln2.forward(x)?)?)
    }

    pub fn forward(&self, x: &Tensor<T>, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
        self.feed_forward(&self.self_attention(x, key_mask)?)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        self.ln1.collect(out);
        self.attn.collect(out);
        self.ln2.collect(out);
        self.ffn.collect(out);
    }

    /// Same storage under new names.
    pub fn alias(&self, name: &str) -> Self {
        EncoderLayer {
            ln1: self.ln1.alias(&format!("{name}.ln1")),
            attn: self.attn.alias(&format!("{name}.attn")),
            ln2: self.ln2.alias(&format!("{name}.ln2")),
            ffn: FeedForward {
                fc1: self.ffn.fc1.alias(&format!("{name}.ffn.fc1")),
                fc2: self.ffn.fc2.alias(&format!("{name}.ffn.fc2")),
            },
        }
    }

    /// Fresh storage holding copies of the current values; names are kept.
    pub fn unshared(&self) -> Self {
        EncoderLayer {
            ln1: self.ln1.unshared(),
            attn: self.attn.unshared(),
            ln2: self.ln2.unshared(),
            ffn: FeedForward { fc1: self.ffn.fc1.unshared(), fc2: self.ffn.fc2.unshared() },
        }
    }
}

/// Decoder layer: the text encoder's self-attention, then cross-attention over
/// image tokens, then the text encoder's feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer<T: Scalar> {
    pub shared: EncoderLayer<T>,
    pub ln_cross: LayerNorm<T>,
    pub cross: MultiHeadAttention<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    /// `image_kv` holds the cross-attention keys and values already gathered
    /// per decoded row.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        text_mask: Option<&[bool]>,
        image_kv: &(Tensor<T>, Tensor<T>),
    ) -> Result<Tensor<T>> {
        let x = self.shared.self_attention(x, text_mask)?;
        let h = self.ln_cross.forward(&x)?;
        let x = x.add(&self.cross.attend(&h, &image_kv.0, &image_kv.1, None)?)?;
        self.shared.feed_forward(&x)
    }

    /// Parameters owned by this layer only.
    pub fn collect_exclusive(&self, out: &mut Vec<Parameter<T>>) {
        self.ln_cross.collect(out);
        self.cross.collect(out);
    }
}
