//! Dense layers with explicit forward caches and backward passes.
//!
//! Every layer stores its parameters in standard-layout arrays so a whole
//! network can be viewed as a flat parameter vector (see [`Params`]). A
//! gradient buffer is simply another instance of the same layer type.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::seed::Rng;

/// Uniform access to every trainable tensor of a module, in a fixed order.
pub trait Params<T: Scalar> {
    /// Visits `(name, values)` for each tensor.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites all tensors from a flat vector produced by [`Params::flatten`].
    fn assign_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: T) {
        self.visit_mut(&mut |v| v.fill(value));
    }

    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |v| {
            let len = v.len();
            for (a, &b) in v.iter_mut().zip(&flat[off..off + len]) {
                *a += b;
            }
            off += v.len();
        });
    }
}

pub(crate) fn slice_of<T: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> &[T] {
    a.as_slice().expect("parameters are standard layout")
}

pub(crate) fn slice_of_mut<T: Scalar, D: ndarray::Dimension>(a: &mut ndarray::Array<T, D>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are standard layout")
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_matrix<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::lit(rng.random_range(-bound..bound)))
}

/// `y = x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: uniform_matrix(rng, fan_in, fan_out, bound),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad`, returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.w.t())
    }

    pub fn backward_params(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) {
        ndarray::linalg::general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "w"), slice_of(&self.w));
        f(&join(prefix, "b"), slice_of(&self.b));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(slice_of_mut(&mut self.w));
        f(slice_of_mut(&mut self.b));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize_lossy(x.ncols());
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
            let s = *inv;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = T::from_usize_lossy(dy.ncols());
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let g = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let inv = cache.inv_std[r];
            for c in 0..dy.ncols() {
                dx[[r, c]] = inv / d * (d * g[c] - sum_g - xh[c] * sum_gx);
            }
        }
        dx
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "gamma"), slice_of(&self.gamma));
        f(&join(prefix, "beta"), slice_of(&self.beta));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(slice_of_mut(&mut self.gamma));
        f(slice_of_mut(&mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softmax<T: Scalar>(x: &Array1<T>) -> Array1<T> {
    softmax_rows(x.view().insert_axis(Axis(0))).remove_axis(Axis(0))
}

/// Back-propagates through a row-wise softmax given its output `p`.
pub fn softmax_rows_backward<T: Scalar>(p: ArrayView2<T>, dp: ArrayView2<T>) -> Array2<T> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((pr, dr), mut zr) in p.rows().into_iter().zip(dp.rows()).zip(dz.rows_mut()) {
        let dot = pr.dot(&dr);
        zr.assign(&(&pr * &(&dr - dot)));
    }
    dz
}

/// Inverted dropout mask, `None` when inactive.
pub fn dropout_mask<T: Scalar>(rng: Option<&mut Rng>, shape: (usize, usize), rate: f64) -> Option<Array2<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}

/// Same-length 1-D convolution over time mapping `d_in` to `d_out` channels.
///
/// The kernel is stored unfolded as a `(kernel * d_in, d_out)` matrix applied
/// to zero-padded sliding windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d<T> {
    pub kernel: usize,
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize, kernel: usize) -> Self {
        let bound = 1.0 / ((kernel * d_in) as f64).sqrt();
        Conv1d {
            kernel,
            w: uniform_matrix(rng, kernel * d_in, d_out, bound),
            b: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, kernel: usize) -> Self {
        Conv1d {
            kernel,
            w: Array2::zeros((kernel * d_in, d_out)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows() / self.kernel
    }

    /// Sliding windows `(T, kernel * d_in)` with zero padding at both ends.
    pub fn unfold(&self, x: ArrayView2<T>) -> Array2<T> {
        let (frames, d_in) = x.dim();
        let half = self.kernel / 2;
        let mut cols = Array2::zeros((frames, self.kernel * d_in));
        for t in 0..frames {
            for j in 0..self.kernel {
                let src = t as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < frames {
                    cols.slice_mut(s![t, j * d_in..(j + 1) * d_in])
                        .assign(&x.row(src as usize));
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let cols = self.unfold(x);
        let y = cols.dot(&self.w) + &self.b;
        (y, cols)
    }

    /// Parameter gradients only; the input is raw data.
    pub fn backward_params(&self, cols: &Array2<T>, dy: ArrayView2<T>, grad: &mut Conv1d<T>) {
        ndarray::linalg::general_mat_mul(T::one(), &cols.t(), &dy, T::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl<T: Scalar> Params<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "w"), slice_of(&self.w));
        f(&join(prefix, "b"), slice_of(&self.b));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(slice_of_mut(&mut self.w));
        f(slice_of_mut(&mut self.b));
    }
}

/// Sinusoidal positional embedding: even dims `sin`, odd dims `cos`.
pub fn positional_encoding<T: Scalar>(frames: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((frames, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention<T> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

pub struct AttentionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(rng: &mut Rng, d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            q: Linear::new(rng, d, d),
            k: Linear::new(rng, d, d),
            v: Linear::new(rng, d, d),
            o: Linear::new(rng, d, d),
        }
    }

    pub fn zeros(d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
        }
    }

    fn head_dim(&self) -> usize {
        self.q.out_dim() / self.heads
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, AttentionCache<T>) {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut ctx = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(scores.view());
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let y = self.o.forward(ctx.view());
        let cache = AttentionCache {
            x: x.to_owned(),
            q,
            k,
            v,
            probs,
            ctx,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: ArrayView2<T>,
        grad: &mut MultiHeadAttention<T>,
    ) -> Array2<T> {
        let dctx = self.o.backward(cache.ctx.view(), dy, &mut grad.o);
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let dp = dctx_h.dot(&cache.v.slice(cols).t());
            let dscores = softmax_rows_backward(p.view(), dp.view()) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.x.view();
        let mut dx = self.q.backward(x, dq.view(), &mut grad.q);
        dx += &self.k.backward(x, dk.view(), &mut grad.k);
        dx += &self.v.backward(x, dv.view(), &mut grad.v);
        dx
    }
}

impl<T: Scalar> Params<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.o.visit_mut(f);
    }
}

/// Pre-norm transformer block:
/// `x + Drop(MHA(LN(x)))`, then `x + Drop(FFN(LN(x)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    drop1: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
    ln2_out: Array2<T>,
    ff_pre: Array2<T>,
    ff_act: Array2<T>,
    drop2: Option<Array2<T>>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(rng: &mut Rng, d: usize, heads: usize, ffn_dim: usize) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(rng, d, heads),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(rng, d, ffn_dim),
            ff2: Linear::new(rng, ffn_dim, d),
        }
    }

    pub fn zeros(d: usize, heads: usize, ffn_dim: usize) -> Self {
        EncoderBlock {
            ln1: LayerNorm::zeros(d),
            attn: MultiHeadAttention::zeros(d, heads),
            ln2: LayerNorm::zeros(d),
            ff1: Linear::zeros(d, ffn_dim),
            ff2: Linear::zeros(ffn_dim, d),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>, mut rng: Option<&mut Rng>, dropout: f64) -> (Array2<T>, BlockCache<T>) {
        let (n1, ln1) = self.ln1.forward(x);
        let (mut a, attn) = self.attn.forward(n1.view());
        let drop1 = dropout_mask(rng.as_deref_mut(), a.dim(), dropout);
        if let Some(m) = &drop1 {
            a *= m;
        }
        let x1 = &x + &a;
        let (n2, ln2) = self.ln2.forward(x1.view());
        let ff_pre = self.ff1.forward(n2.view());
        let ff_act = ff_pre.mapv(gelu);
        let mut f = self.ff2.forward(ff_act.view());
        let drop2 = dropout_mask(rng, f.dim(), dropout);
        if let Some(m) = &drop2 {
            f *= m;
        }
        let y = x1 + f;
        let cache = BlockCache {
            ln1,
            attn,
            drop1,
            ln2,
            ln2_out: n2,
            ff_pre,
            ff_act,
            drop2,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: ArrayView2<T>, grad: &mut EncoderBlock<T>) -> Array2<T> {
        let mut df = dy.to_owned();
        if let Some(m) = &cache.drop2 {
            df *= m;
        }
        let dact = self.ff2.backward(cache.ff_act.view(), df.view(), &mut grad.ff2);
        let dpre = dact * &cache.ff_pre.mapv(gelu_grad);
        let dn2 = self.ff1.backward(cache.ln2_out.view(), dpre.view(), &mut grad.ff1);
        let dx1 = &dy + &self.ln2.backward(&cache.ln2, dn2.view(), &mut grad.ln2);
        let mut da = dx1.clone();
        if let Some(m) = &cache.drop1 {
            da *= m;
        }
        let dn1 = self.attn.backward(&cache.attn, da.view(), &mut grad.attn);
        dx1 + self.ln1.backward(&cache.ln1, dn1.view(), &mut grad.ln1)
    }
}

impl<T: Scalar> Params<T> for EncoderBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.ln1.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

/// Stack of pre-norm blocks followed by a final layer norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder<T> {
    pub blocks: Vec<EncoderBlock<T>>,
    pub ln_f: LayerNorm<T>,
}

pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(rng: &mut Rng, d: usize, heads: usize, ffn_dim: usize, layers: usize) -> Self {
        Encoder {
            blocks: (0..layers).map(|_| EncoderBlock::new(rng, d, heads, ffn_dim)).collect(),
            ln_f: LayerNorm::new(d),
        }
    }

    pub fn zeros(d: usize, heads: usize, ffn_dim: usize, layers: usize) -> Self {
        Encoder {
            blocks: (0..layers).map(|_| EncoderBlock::zeros(d, heads, ffn_dim)).collect(),
            ln_f: LayerNorm::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>, mut rng: Option<&mut Rng>, dropout: f64) -> (Array2<T>, EncoderCache<T>) {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, c) = block.forward(h.view(), rng.as_deref_mut(), dropout);
            caches.push(c);
            h = next;
        }
        let (y, ln_f) = self.ln_f.forward(h.view());
        (y, EncoderCache { blocks: caches, ln_f })
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dy: ArrayView2<T>, grad: &mut Encoder<T>) -> Array2<T> {
        let mut d = self.ln_f.backward(&cache.ln_f, dy, &mut grad.ln_f);
        for ((block, c), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            d = block.backward(c, d.view(), g);
        }
        d
    }
}

impl<T: Scalar> Params<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.ln_f.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::central_difference;
    use crate::seed;

    fn rand_matrix(rng: &mut Rng, r: usize, c: usize) -> Array2<f64> {
        uniform_matrix(rng, r, c, 1.0)
    }

    /// Checks `dL/dx` for `L = sum(y * probe)` against central differences.
    fn check_input_grad<F, B>(x: &Array2<f64>, probe: &Array2<f64>, fwd: F, bwd: B)
    where
        F: Fn(&Array2<f64>) -> Array2<f64>,
        B: Fn(&Array2<f64>) -> Array2<f64>,
    {
        let analytic = bwd(probe);
        let loss = |v: &[f64]| {
            let xm = Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            (fwd(&xm) * probe).sum()
        };
        let numeric = central_difference(loss, x.as_slice().unwrap(), 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 + 1e-5 * n.abs(), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = seed::rng(1, &[]);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma = Array1::from_shape_fn(5, |i| 0.5 + i as f64 * 0.3);
        let x = rand_matrix(&mut rng, 3, 5);
        let probe = rand_matrix(&mut rng, 3, 5);
        check_input_grad(
            &x,
            &probe,
            |x| ln.forward(x.view()).0,
            |dy| {
                let (_, c) = ln.forward(x.view());
                ln.backward(&c, dy.view(), &mut LayerNorm::zeros(5))
            },
        );
    }

    #[test]
    fn attention_input_gradient() {
        let mut rng = seed::rng(2, &[]);
        let attn = MultiHeadAttention::<f64>::new(&mut rng, 6, 2);
        let x = rand_matrix(&mut rng, 4, 6);
        let probe = rand_matrix(&mut rng, 4, 6);
        check_input_grad(
            &x,
            &probe,
            |x| attn.forward(x.view()).0,
            |dy| {
                let (_, c) = attn.forward(x.view());
                attn.backward(&c, dy.view(), &mut MultiHeadAttention::zeros(6, 2))
            },
        );
    }

    #[test]
    fn block_input_gradient() {
        let mut rng = seed::rng(3, &[]);
        let block = EncoderBlock::<f64>::new(&mut rng, 4, 2, 8);
        let x = rand_matrix(&mut rng, 3, 4);
        let probe = rand_matrix(&mut rng, 3, 4);
        check_input_grad(
            &x,
            &probe,
            |x| block.forward(x.view(), None, 0.0).0,
            |dy| {
                let (_, c) = block.forward(x.view(), None, 0.0);
                block.backward(&c, dy.view(), &mut EncoderBlock::zeros(4, 2, 8))
            },
        );
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn positional_encoding_position_zero() {
        let pe = positional_encoding::<f64>(20, 40);
        assert_eq!(pe.dim(), (20, 40));
        for i in 0..40 {
            assert_eq!(pe[[0, i]], if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn conv_same_length_and_padding() {
        let mut rng = seed::rng(4, &[]);
        let conv = Conv1d::<f64>::new(&mut rng, 2, 3, 3);
        let x = rand_matrix(&mut rng, 5, 2);
        let (y, cols) = conv.forward(x.view());
        assert_eq!(y.dim(), (5, 3));
        // first window: zero pad, x[0], x[1]
        assert_eq!(cols.slice(s![0, 0..2]).sum(), 0.0);
        assert_eq!(cols.slice(s![0, 2..4]), x.row(0));
        assert_eq!(cols.slice(s![4, 4..6]).sum(), 0.0);
    }

    #[test]
    fn params_flatten_roundtrip() {
        let mut rng = seed::rng(5, &[]);
        let enc = Encoder::<f64>::new(&mut rng, 4, 2, 8, 2);
        let flat = enc.flatten();
        let mut other = Encoder::zeros(4, 2, 8, 2);
        other.assign_flat(&flat);
        assert_eq!(other, enc);
        let mut names = Vec::new();
        enc.visit("enc", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names[0], "enc.block0.ln1.gamma");
        assert_eq!(names.last().unwrap(), "enc.ln_f.beta");
    }
}
