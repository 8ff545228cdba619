//! Forward operators with their analytic gradients.

use crate::error::{dim_err, CadaError, Result};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};

use super::tensor::{BackwardCtx, Tensor};

/// Additive bias applied to masked attention scores before the softmax.
pub const MASK_FILL: f64 = -1e9;

fn suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums a gradient over the leading (broadcast) axes.
fn reduce_to_suffix<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
    }
    out
}

fn check_nan<T: Scalar>(data: &[T], op: &str) -> Result<()> {
    if data.iter().any(|x| x.is_nan()) {
        return Err(CadaError::Numeric(format!("NaN input to {op}")));
    }
    Ok(())
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum. `other` may have a shape equal to a trailing suffix of
    /// `self`'s shape, in which case it is repeated over the leading axes.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if !suffix_broadcast(self.shape(), other.shape()) {
            return Err(dim_err!("add: shapes {:?} and {:?} are not broadcastable", self.shape(), other.shape()));
        }
        let n = other.numel();
        let data: Vec<T> = {
            let a = self.data();
            let b = other.data();
            a.iter().enumerate().map(|(i, &x)| x + b[i % n]).collect()
        };
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let gb = if ctx.grad.len() == n { ctx.grad.to_vec() } else { reduce_to_suffix(ctx.grad, n) };
                vec![Some(ctx.grad.to_vec()), Some(gb)]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(dim_err!("sub: shapes {:?} and {:?} differ", self.shape(), other.shape()));
        }
        let data: Vec<T> = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|&g| -g).collect())]),
        ))
    }

    /// Elementwise product with the same suffix broadcasting as [`Tensor::add`].
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if !suffix_broadcast(self.shape(), other.shape()) {
            return Err(dim_err!("mul: shapes {:?} and {:?} are not broadcastable", self.shape(), other.shape()));
        }
        let n = other.numel();
        let data: Vec<T> = {
            let a = self.data();
            let b = other.data();
            a.iter().enumerate().map(|(i, &x)| x * b[i % n]).collect()
        };
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let ga: Vec<T> = ctx.grad.iter().enumerate().map(|(i, &g)| g * b[i % n]).collect();
                let prod: Vec<T> = ctx.grad.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect();
                vec![Some(ga), Some(reduce_to_suffix(&prod, n))]
            }),
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|ctx| {
                let x = ctx.parents[0].data();
                vec![Some(ctx.grad.iter().zip(x.iter()).map(|(&g, &x)| g / x).collect())]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.iter().zip(ctx.out).map(|(&g, &y)| g * y).collect())]),
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        let one = T::one();
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (one + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let three = T::lit(3.0);
                let g = ctx
                    .grad
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
                        g * d
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let n = self.numel();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sum along the last axis.
    pub fn sum_last(&self) -> Tensor<T> {
        let d = self.last_dim();
        let data: Vec<T> = self.data().chunks(d).map(|c| c.iter().fold(T::zero(), |a, &x| a + x)).collect();
        let mut shape = self.shape()[..self.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g, d)).collect())]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        let [m, n] = *self.shape() else {
            return Err(dim_err!("transpose2d expects a matrix, got {:?}", self.shape()));
        };
        let data = transpose(&self.data(), m, n);
        Ok(Tensor::from_op(
            data,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(transpose(ctx.grad, n, m))]),
        ))
    }

    /// Matrix product `self · other` of an m×k and a k×n matrix.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` for an m×k and an n×k matrix.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor<T>, b_transposed: bool) -> Result<Tensor<T>> {
        let (&[m, k], &[r, c]) = (self.shape(), other.shape()) else {
            return Err(dim_err!("matmul expects matrices, got {:?} and {:?}", self.shape(), other.shape()));
        };
        let (kb, n) = if b_transposed { (c, r) } else { (r, c) };
        if k != kb {
            let shown = if b_transposed { format!("{:?}ᵀ", other.shape()) } else { format!("{:?}", other.shape()) };
            return Err(dim_err!("matmul inner dimensions disagree: {:?} · {shown}", self.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let a = self.data();
            let b = other.data();
            let bm = if b_transposed { MatRef::new(&b, r, c).t() } else { MatRef::new(&b, r, c) };
            gemm(MatRef::new(&a, m, k), bm, T::zero(), MatMut::new(&mut out, m, n));
        }
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let g = MatRef::new(ctx.grad, m, n);
                let ga = ctx.parents[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    // dA = G · B  (B stored n×k)  or  G · Bᵀ (B stored k×n)
                    let bm = if b_transposed { MatRef::new(&b, r, c) } else { MatRef::new(&b, r, c).t() };
                    gemm(g, bm, T::zero(), MatMut::new(&mut ga, m, k));
                    ga
                });
                let gb = ctx.parents[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); r * c];
                    if b_transposed {
                        // dB = Gᵀ · A  (n×k)
                        gemm(g.t(), MatRef::new(&a, m, k), T::zero(), MatMut::new(&mut gb, r, c));
                    } else {
                        // dB = Aᵀ · G  (k×n)
                        gemm(MatRef::new(&a, m, k).t(), g, T::zero(), MatMut::new(&mut gb, r, c));
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map over the last axis: `x·W + b` with `W` stored `[in, out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let &[d_in, d_out] = weight.shape() else {
            return Err(dim_err!("linear weight must be a matrix, got {:?}", weight.shape()));
        };
        if self.last_dim() != d_in {
            return Err(dim_err!("linear: input {:?} does not match weight {:?}", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(dim_err!("linear: bias {:?} does not match weight {:?}", b.shape(), weight.shape()));
            }
        }
        let rows = self.numel() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        {
            let x = self.data();
            let w = weight.data();
            if let Some(b) = bias {
                let b = b.data();
                out.chunks_mut(d_out).for_each(|row| row.copy_from_slice(&b));
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(MatRef::new(&x, rows, d_in), MatRef::new(&w, d_in, d_out), beta, MatMut::new(&mut out, rows, d_out));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            shape,
            parents,
            Box::new(move |ctx| {
                let g = MatRef::new(ctx.grad, rows, d_out);
                let gx = ctx.parents[0].requires_grad().then(|| {
                    let w = ctx.parents[1].data();
                    let mut gx = vec![T::zero(); rows * d_in];
                    gemm(g, MatRef::new(&w, d_in, d_out).t(), T::zero(), MatMut::new(&mut gx, rows, d_in));
                    gx
                });
                let gw = ctx.parents[1].requires_grad().then(|| {
                    let x = ctx.parents[0].data();
                    let mut gw = vec![T::zero(); d_in * d_out];
                    gemm(MatRef::new(&x, rows, d_in).t(), g, T::zero(), MatMut::new(&mut gw, d_in, d_out));
                    gw
                });
                let mut grads = vec![gx, gw];
                if ctx.parents.len() == 3 {
                    grads.push(Some(reduce_to_suffix(ctx.grad, d_out)));
                }
                grads
            }),
        ))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_nan(&self.data(), "softmax")?;
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let mut out = self.to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| out[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (out[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[idx(i)] /= sum;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); ctx.grad.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot = (0..len).fold(T::zero(), |a, i| a + ctx.grad[idx(i)] * ctx.out[idx(i)]);
                        for i in 0..len {
                            gx[idx(i)] = ctx.out[idx(i)] * (ctx.grad[idx(i)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `log(softmax(x))` along `axis`, computed without forming the softmax.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_nan(&self.data(), "log_softmax")?;
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let mut out = self.to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| out[idx(i)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..len).fold(T::zero(), |a, i| a + (out[idx(i)] - max).exp()).ln();
                for i in 0..len {
                    out[idx(i)] = out[idx(i)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); ctx.grad.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let gsum = (0..len).fold(T::zero(), |a, i| a + ctx.grad[idx(i)]);
                        for i in 0..len {
                            gx[idx(i)] = ctx.grad[idx(i)] - ctx.out[idx(i)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalisation over the last axis followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(dim_err!(
                "layer_norm: input {:?} vs gamma {:?} / beta {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            ));
        }
        let rows = self.numel() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mu = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
                let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / dn;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *h = (v - mu) * rs;
                }
            }
        }
        let out: Vec<T> = {
            let g = gamma.data();
            let b = beta.data();
            xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx| {
                let g = ctx.parents[1].data();
                let mut gx = vec![T::zero(); rows * d];
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let go = &ctx.grad[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in 0..d {
                        ggamma[i] += go[i] * xh[i];
                        gbeta[i] += go[i];
                        dxhat[i] = go[i] * g[i];
                        mean_d += dxhat[i];
                        mean_dx += dxhat[i] * xh[i];
                    }
                    mean_d /= dn;
                    mean_dx /= dn;
                    for i in 0..d {
                        gx[r * d + i] = rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }

    /// Divides every last-axis vector by `sqrt(|x|² + eps)`.
    pub fn l2_normalize(&self, eps: T) -> Tensor<T> {
        let d = self.last_dim();
        let norms: Vec<T> = self
            .data()
            .chunks(d)
            .map(|r| (r.iter().fold(T::zero(), |a, &v| a + v * v) + eps).sqrt())
            .collect();
        let out: Vec<T> = self.data().iter().enumerate().map(|(i, &v)| v / norms[i / d]).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); ctx.grad.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = &ctx.out[r * d..(r + 1) * d];
                    let g = &ctx.grad[r * d..(r + 1) * d];
                    let dot = g.iter().zip(y).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for i in 0..d {
                        gx[r * d + i] = (g[i] - y[i] * dot) / n;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Selects entries along axis 0 (rows may repeat).
    pub fn take_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let n0 = self.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n0) {
            return Err(dim_err!("take_rows: index {bad} out of range for shape {:?}", self.shape()));
        }
        if idx.is_empty() {
            return Err(dim_err!("take_rows: empty index list"));
        }
        let row = self.numel() / n0;
        let mut out = Vec::with_capacity(idx.len() * row);
        {
            let x = self.data();
            for &i in idx {
                out.extend_from_slice(&x[i * row..(i + 1) * row]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); n0 * row];
                for (k, &i) in idx.iter().enumerate() {
                    for (a, &b) in gx[i * row..(i + 1) * row].iter_mut().zip(&ctx.grad[k * row..(k + 1) * row]) {
                        *a += b;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// For an `[R, C]` matrix returns `[R]` with entry `r` equal to `x[r, idx[r]]`.
    pub fn gather_last(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let &[r, c] = self.shape() else {
            return Err(dim_err!("gather_last expects a matrix, got {:?}", self.shape()));
        };
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(dim_err!("gather_last: {} indices for shape {:?}", idx.len(), self.shape()));
        }
        let out: Vec<T> = {
            let x = self.data();
            idx.iter().enumerate().map(|(row, &j)| x[row * c + j]).collect()
        };
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![r],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); r * c];
                for (row, &j) in idx.iter().enumerate() {
                    gx[row * c + j] = ctx.grad[row];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean-pools row windows of a `[B, L, D]` tensor into `[B, W, D]`; window
    /// `w` covers rows `windows[w].0 .. windows[w].1`.
    pub fn window_mean(&self, windows: &[(usize, usize)]) -> Result<Tensor<T>> {
        let &[b, l, d] = self.shape() else {
            return Err(dim_err!("window_mean expects [B, L, D], got {:?}", self.shape()));
        };
        if windows.is_empty() || windows.iter().any(|&(s, e)| s >= e || e > l) {
            return Err(dim_err!("window_mean: invalid windows {windows:?} for length {l}"));
        }
        let w = windows.len();
        let mut out = vec![T::zero(); b * w * d];
        {
            let x = self.data();
            for bi in 0..b {
                for (wi, &(s, e)) in windows.iter().enumerate() {
                    let inv = T::one() / T::from_usize(e - s).unwrap();
                    let o = &mut out[(bi * w + wi) * d..(bi * w + wi + 1) * d];
                    for row in s..e {
                        let xr = &x[(bi * l + row) * d..(bi * l + row + 1) * d];
                        o.iter_mut().zip(xr).for_each(|(a, &v)| *a += v);
                    }
                    o.iter_mut().for_each(|a| *a *= inv);
                }
            }
        }
        let windows = windows.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![b, w, d],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); b * l * d];
                for bi in 0..b {
                    for (wi, &(s, e)) in windows.iter().enumerate() {
                        let inv = T::one() / T::from_usize(e - s).unwrap();
                        let g = &ctx.grad[(bi * w + wi) * d..(bi * w + wi + 1) * d];
                        for row in s..e {
                            let gr = &mut gx[(bi * l + row) * d..(bi * l + row + 1) * d];
                            gr.iter_mut().zip(g).for_each(|(a, &v)| *a += v * inv);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Prepends the vector `token` (`[D]`) to every sequence of a `[B, N, D]` tensor.
    pub fn prepend_token(&self, token: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, n, d] = self.shape() else {
            return Err(dim_err!("prepend_token expects [B, N, D], got {:?}", self.shape()));
        };
        if token.shape() != [d] {
            return Err(dim_err!("prepend_token: token {:?} for width {d}", token.shape()));
        }
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        {
            let x = self.data();
            let t = token.data();
            for bi in 0..b {
                out.extend_from_slice(&t);
                out.extend_from_slice(&x[bi * n * d..(bi + 1) * n * d]);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![b, n + 1, d],
            vec![self.clone(), token.clone()],
            Box::new(move |ctx| {
                let mut gx = Vec::with_capacity(b * n * d);
                let mut gt = vec![T::zero(); d];
                for bi in 0..b {
                    let base = bi * (n + 1) * d;
                    gt.iter_mut().zip(&ctx.grad[base..base + d]).for_each(|(a, &v)| *a += v);
                    gx.extend_from_slice(&ctx.grad[base + d..base + (n + 1) * d]);
                }
                vec![Some(gx), Some(gt)]
            }),
        ))
    }
}

fn transpose<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Rows of `table` (`[V, D]`) selected by `ids`, shaped `[ids.len(), D]`.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.ndim() != 2 {
        return Err(dim_err!("embedding table must be a matrix, got {:?}", table.shape()));
    }
    table.take_rows(ids)
}

/// Mean over the rows of an `[N, D]` matrix, shaped `[D]`.
pub fn mean_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, d] = x.shape() else {
        return Err(dim_err!("mean_pool expects [N, D], got {:?}", x.shape()));
    };
    x.reshape(&[1, n, d])?.window_mean(&[(0, n)])?.reshape(&[d])
}

/// `Σ pᵢ·log((pᵢ+eps)/(qᵢ+eps))` for two probability vectors.
pub fn kl_div<T: Scalar>(p: &[T], q: &[T], eps: T) -> Result<T> {
    if p.len() != q.len() {
        return Err(dim_err!("kl_div: lengths {} and {} differ", p.len(), q.len()));
    }
    Ok(p.iter().zip(q).fold(T::zero(), |acc, (&pi, &qi)| acc + kl_term(pi, qi, eps)))
}

#[inline]
fn kl_term<T: Scalar>(p: T, q: T, eps: T) -> T {
    if p == T::zero() {
        T::zero()
    } else {
        p * ((p + eps) / (q + eps)).ln()
    }
}

/// Row-wise smoothed KL divergence of two `[R, K]` tensors, shaped `[R]`.
/// Differentiable in both arguments.
pub fn kl_div_rows<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if p.shape() != q.shape() || p.ndim() != 2 {
        return Err(dim_err!("kl_div_rows: shapes {:?} and {:?}", p.shape(), q.shape()));
    }
    let (r, k) = (p.shape()[0], p.shape()[1]);
    let out: Vec<T> = {
        let pd = p.data();
        let qd = q.data();
        (0..r).map(|i| kl_div(&pd[i * k..(i + 1) * k], &qd[i * k..(i + 1) * k], eps).unwrap()).collect()
    };
    Ok(Tensor::from_op(
        out,
        vec![r],
        vec![p.clone(), q.clone()],
        Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let pd = ctx.parents[0].data();
            let qd = ctx.parents[1].data();
            let mut gp = vec![T::zero(); r * k];
            let mut gq = vec![T::zero(); r * k];
            for i in 0..r * k {
                let g = ctx.grad[i / k];
                let (pi, qi) = (pd[i], qd[i]);
                gp[i] = g * (((pi + eps) / (qi + eps)).ln() + pi / (pi + eps));
                gq[i] = -g * pi / (qi + eps);
            }
            vec![Some(gp), Some(gq)]
        }),
    ))
}

/// Multi-head scaled dot-product attention without projections.
///
/// `q` is `[B, Lq, D]`, `k` and `v` are `[B, Lk, D]`, `key_mask` (length
/// `B·Lk`, `true` = attend) hides padded keys. Heads split `D` into equal
/// column blocks; the per-head outputs are written back into the same blocks.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<Tensor<T>> {
    Ok(attention_with_weights(q, k, v, key_mask, heads)?.0)
}

/// [`attention`] that also returns the `[B, heads, Lq, Lk]` weights.
pub fn attention_with_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let &[b, lq, d] = q.shape() else {
        return Err(dim_err!("attention query must be [B, L, D], got {:?}", q.shape()));
    };
    let &[bk, lk, dk] = k.shape() else {
        return Err(dim_err!("attention key must be [B, L, D], got {:?}", k.shape()));
    };
    if bk != b || dk != d || v.shape() != k.shape() {
        return Err(dim_err!("attention: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(dim_err!("attention: width {d} not divisible by {heads} heads"));
    }
    if let Some(m) = key_mask {
        if m.len() != b * lk {
            return Err(dim_err!("attention: mask length {} != key length {} x batch {b}", m.len(), lk));
        }
    }
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let fill = T::lit(MASK_FILL);
    let mask: Option<Vec<bool>> = key_mask.map(|m| m.to_vec());
    let mut probs = vec![T::zero(); b * heads * lq * lk];
    let mut out = vec![T::zero(); b * lq * d];
    {
        let qd = q.data();
        let kd = k.data();
        let vd = v.data();
        for bi in 0..b {
            let qb = &qd[bi * lq * d..(bi + 1) * lq * d];
            let kb = &kd[bi * lk * d..(bi + 1) * lk * d];
            let vb = &vd[bi * lk * d..(bi + 1) * lk * d];
            let ob = &mut out[bi * lq * d..(bi + 1) * lq * d];
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                gemm(
                    MatRef::block(qb, d, 0, lq, h * dh, dh),
                    MatRef::block(kb, d, 0, lk, h * dh, dh).t(),
                    T::zero(),
                    MatMut::new(p, lq, lk),
                );
                for row in p.chunks_mut(lk) {
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if let Some(m) = &mask {
                            if !m[bi * lk + j] {
                                *s += fill;
                            }
                        }
                    }
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= sum);
                }
                gemm(
                    MatRef::new(p, lq, lk),
                    MatRef::block(vb, d, 0, lk, h * dh, dh),
                    T::zero(),
                    MatMut::block(ob, d, 0, lq, h * dh, dh),
                );
            }
        }
    }
    let weights = probs.clone();
    let t = Tensor::from_op(
        out,
        vec![b, lq, d],
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |ctx| {
            let qd = ctx.parents[0].data();
            let kd = ctx.parents[1].data();
            let vd = ctx.parents[2].data();
            let mut gq = vec![T::zero(); b * lq * d];
            let mut gk = vec![T::zero(); b * lk * d];
            let mut gv = vec![T::zero(); b * lk * d];
            let mut dp = vec![T::zero(); lq * lk];
            for bi in 0..b {
                let qb = &qd[bi * lq * d..(bi + 1) * lq * d];
                let kb = &kd[bi * lk * d..(bi + 1) * lk * d];
                let vb = &vd[bi * lk * d..(bi + 1) * lk * d];
                let gob = &ctx.grad[bi * lq * d..(bi + 1) * lq * d];
                for h in 0..heads {
                    let p = &probs[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                    let go = MatRef::block(gob, d, 0, lq, h * dh, dh);
                    // dV = Pᵀ · dO
                    gemm(
                        MatRef::new(p, lq, lk).t(),
                        go,
                        T::zero(),
                        MatMut::block(&mut gv[bi * lk * d..(bi + 1) * lk * d], d, 0, lk, h * dh, dh),
                    );
                    // dP = dO · Vᵀ
                    gemm(go, MatRef::block(vb, d, 0, lk, h * dh, dh).t(), T::zero(), MatMut::new(&mut dp, lq, lk));
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-scaled
                    for i in 0..lq {
                        let pr = &p[i * lk..(i + 1) * lk];
                        let dr = &mut dp[i * lk..(i + 1) * lk];
                        let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        for (dv, &pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dQ = dS · K ; dK = dSᵀ · Q
                    gemm(
                        MatRef::new(&dp, lq, lk),
                        MatRef::block(kb, d, 0, lk, h * dh, dh),
                        T::zero(),
                        MatMut::block(&mut gq[bi * lq * d..(bi + 1) * lq * d], d, 0, lq, h * dh, dh),
                    );
                    gemm(
                        MatRef::new(&dp, lq, lk).t(),
                        MatRef::block(qb, d, 0, lq, h * dh, dh),
                        T::zero(),
                        MatMut::block(&mut gk[bi * lk * d..(bi + 1) * lk * d], d, 0, lk, h * dh, dh),
                    );
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }),
    );
    Ok((t, weights))
}
