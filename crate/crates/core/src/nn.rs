//! Dense layers with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same code trains in f32 and
//! runs finite-difference checks in f64. Activations are row-major
//! `tokens x features` matrices.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense matrix. Vectors are `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let d = Normal::new(0.0, std).unwrap();
        Self { rows, cols, data: (0..rows * cols).map(|_| F::of(d.sample(rng))).collect() }
    }

    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self { rows, cols, data: (0..rows * cols).map(|_| F::of(rng.random_range(-a..a))).collect() }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_(&mut self) {
        self.data.iter_mut().for_each(|x| *x = F::zero());
    }

    pub fn add_(&mut self, other: &Self) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    pub fn cast<G: Real>(&self) -> Mat<G> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| G::of(x.f64())).collect() }
    }

    /// Stacks the selected rows.
    pub fn gather_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::zeros(rows.len(), self.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// `self @ other^T`: `[n, k] x [m, k] -> [n, m]`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t inner dims");
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut s = F::zero();
                for k in 0..self.cols {
                    s += a[k] * b[k];
                }
                out.data[i * other.rows + j] = s;
            }
        }
        out
    }

    /// `self @ other`: `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == F::zero() {
                    continue;
                }
                for (x, &b) in o.iter_mut().zip(other.row(k)) {
                    *x += a * b;
                }
            }
        }
        out
    }

    /// `self^T @ other`: `[n, k] x [n, m] -> [k, m]`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul outer dims");
        let mut out = Self::zeros(self.cols, other.cols);
        for n in 0..self.rows {
            let b = other.row(n);
            for k in 0..self.cols {
                let a = self.data[n * self.cols + k];
                if a == F::zero() {
                    continue;
                }
                for (x, &bv) in out.data[k * other.cols..(k + 1) * other.cols].iter_mut().zip(b) {
                    *x += a * bv;
                }
            }
        }
        out
    }
}

/// Uniform access to named parameter tensors, in a fixed order.
pub trait ParamVisit<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>));

    fn named(&self) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, m| out.push((n, m)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.data.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Whether decoupled weight decay applies to a parameter: matrices of
/// linear layers only, never biases, norms, position tables or tokens.
pub fn decays(name: &str) -> bool {
    name.rsplit('.').next() == Some("weight") && !name.contains("norm")
}

/// Zero-filled copy with the same shapes.
pub fn zeros_like<F: Real, P: ParamVisit<F> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, m| m.zero_());
    z
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<F: Real, P: ParamVisit<F>>(acc: &mut P, other: &P) {
    let src = other.named();
    for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(src) {
        a.add_(b);
    }
}

pub fn scale<F: Real, P: ParamVisit<F>>(p: &mut P, s: F) {
    p.visit_mut("", &mut |_, m| m.scale_(s));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    /// `[out, in]`
    pub weight: Mat<F>,
    /// `[1, out]`
    pub bias: Mat<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self { weight: Mat::xavier(output, input, rng), bias: Mat::zeros(1, output) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Mat::zeros(output, input), bias: Mat::zeros(1, output) }
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        let mut y = x.matmul_t(&self.weight);
        for r in 0..y.rows {
            for (a, &b) in y.row_mut(r).iter_mut().zip(&self.bias.data) {
                *a += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat<F>, dy: &Mat<F>, grad: &mut Self) -> Mat<F> {
        grad.weight.add_(&dy.t_matmul(x));
        for r in 0..dy.rows {
            for (g, &d) in grad.bias.data.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        dy.matmul(&self.weight)
    }
}

impl<F> ParamVisit<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    pub weight: Mat<F>,
    pub bias: Mat<F>,
}

pub struct LayerNormCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self { weight: Mat::filled(1, dim, F::one()), bias: Mat::zeros(1, dim) }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, LayerNormCache<F>) {
        let n = F::of(x.cols as f64);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..x.cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * x.cols + c] = h;
                y.data[r * x.cols + c] = h * self.weight.data[c] + self.bias.data[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Mat<F>, grad: &mut Self) -> Mat<F> {
        let cols = dy.cols;
        let n = F::of(cols as f64);
        let mut dx = Mat::zeros(dy.rows, cols);
        for r in 0..dy.rows {
            let d = dy.row(r);
            let h = cache.xhat.row(r);
            let mut sum_dh = F::zero();
            let mut sum_dh_h = F::zero();
            for c in 0..cols {
                grad.weight.data[c] += d[c] * h[c];
                grad.bias.data[c] += d[c];
                let dh = d[c] * self.weight.data[c];
                sum_dh += dh;
                sum_dh_h += dh * h[c];
            }
            let (m1, m2) = (sum_dh / n, sum_dh_h / n);
            for c in 0..cols {
                let dh = d[c] * self.weight.data[c];
                dx.data[r * cols + c] = cache.rstd[r] * (dh - m1 - h[c] * m2);
            }
        }
        dx
    }
}

impl<F> ParamVisit<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// tanh-approximated GELU.
pub fn gelu<F: Real>(x: &Mat<F>) -> Mat<F> {
    let (c, k, half) = (F::of(GELU_C), F::of(0.044715), F::of(0.5));
    let data = x.data.iter().map(|&v| half * v * (F::one() + (c * (v + k * v * v * v)).tanh())).collect();
    Mat { rows: x.rows, cols: x.cols, data }
}

pub fn gelu_backward<F: Real>(x: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
    let (c, k, half, three) = (F::of(GELU_C), F::of(0.044715), F::of(0.5), F::of(3.0));
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &d)| {
            let th = (c * (v + k * v * v * v)).tanh();
            let dth = (F::one() - th * th) * c * (F::one() + three * k * v * v);
            d * (half * (F::one() + th) + half * v * dth)
        })
        .collect();
    Mat { rows: x.rows, cols: x.cols, data }
}

/// In-place row softmax.
pub fn softmax_rows<F: Real>(m: &mut Mat<F>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

/// Backward through a row softmax given its output `a`.
pub fn softmax_rows_backward<F: Real>(a: &Mat<F>, da: &Mat<F>) -> Mat<F> {
    let mut ds = Mat::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let (ar, dr) = (a.row(r), da.row(r));
        let dot: F = ar.iter().zip(dr).map(|(&x, &y)| x * y).sum();
        for (o, (&x, &y)) in ds.row_mut(r).iter_mut().zip(ar.iter().zip(dr)) {
            *o = x * (y - dot);
        }
    }
    ds
}

/// Columns `[start, start + width)` of `m`.
pub fn slice_cols<F: Real>(m: &Mat<F>, start: usize, width: usize) -> Mat<F> {
    let mut out = Mat::zeros(m.rows, width);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

/// `m[:, start..start + src.cols] += src`.
pub fn add_cols<F: Real>(m: &mut Mat<F>, start: usize, src: &Mat<F>) {
    for r in 0..m.rows {
        for (a, &b) in m.row_mut(r)[start..start + src.cols].iter_mut().zip(src.row(r)) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<F> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
}

pub struct AttentionCache<F> {
    x: Mat<F>,
    qkv: Mat<F>,
    probs: Vec<Mat<F>>,
    ctx: Mat<F>,
}

impl<F: Real> Attention<F> {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self { qkv: Linear::new(dim, 3 * dim, rng), proj: Linear::new(dim, dim, rng) }
    }

    pub fn forward(&self, x: &Mat<F>, heads: usize) -> (Mat<F>, AttentionCache<F>) {
        let d = x.cols;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut ctx = Mat::zeros(x.rows, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = slice_cols(&qkv, h * dh, dh);
            let k = slice_cols(&qkv, d + h * dh, dh);
            let v = slice_cols(&qkv, 2 * d + h * dh, dh);
            let mut a = q.matmul_t(&k);
            a.scale_(scale);
            softmax_rows(&mut a);
            add_cols(&mut ctx, h * dh, &a.matmul(&v));
            probs.push(a);
        }
        let y = self.proj.forward(&ctx);
        (y, AttentionCache { x: x.clone(), qkv, probs, ctx })
    }

    pub fn backward(&self, cache: &AttentionCache<F>, dy: &Mat<F>, grad: &mut Self) -> Mat<F> {
        let heads = cache.probs.len();
        let d = cache.x.cols;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let dctx = self.proj.backward(&cache.ctx, dy, &mut grad.proj);
        let mut dqkv = Mat::zeros(cache.qkv.rows, 3 * d);
        for (h, a) in cache.probs.iter().enumerate() {
            let q = slice_cols(&cache.qkv, h * dh, dh);
            let k = slice_cols(&cache.qkv, d + h * dh, dh);
            let v = slice_cols(&cache.qkv, 2 * d + h * dh, dh);
            let dout = slice_cols(&dctx, h * dh, dh);
            let da = dout.matmul_t(&v);
            let dv = a.t_matmul(&dout);
            let mut ds = softmax_rows_backward(a, &da);
            ds.scale_(scale);
            let dq = ds.matmul(&k);
            let dk = ds.t_matmul(&q);
            add_cols(&mut dqkv, h * dh, &dq);
            add_cols(&mut dqkv, d + h * dh, &dk);
            add_cols(&mut dqkv, 2 * d + h * dh, &dv);
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }
}

impl<F> ParamVisit<F> for Attention<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<F> {
    pub norm1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    ln2_out: Mat<F>,
    fc1_out: Mat<F>,
    act: Mat<F>,
}

impl<F: Real> Block<F> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Mat<F>, heads: usize) -> (Mat<F>, BlockCache<F>) {
        let (n1, ln1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&n1, heads);
        let mut h = x.clone();
        h.add_(&a);
        let (ln2_out, ln2) = self.norm2.forward(&h);
        let fc1_out = self.fc1.forward(&ln2_out);
        let act = gelu(&fc1_out);
        let m = self.fc2.forward(&act);
        h.add_(&m);
        (h, BlockCache { ln1, attn, ln2, ln2_out, fc1_out, act })
    }

    pub fn backward(&self, cache: &BlockCache<F>, dy: &Mat<F>, grad: &mut Self) -> Mat<F> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dfc1 = gelu_backward(&cache.fc1_out, &dact);
        let dln2 = self.fc1.backward(&cache.ln2_out, &dfc1, &mut grad.fc1);
        let mut dh = self.norm2.backward(&cache.ln2, &dln2, &mut grad.norm2);
        dh.add_(dy);
        let dn1 = self.attn.backward(&cache.attn, &dh, &mut grad.attn);
        let mut dx = self.norm1.backward(&cache.ln1, &dn1, &mut grad.norm1);
        dx.add_(&dh);
        dx
    }
}

impl<F> ParamVisit<F> for Block<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// Runs a stack of blocks, keeping caches for backward.
pub fn blocks_forward<F: Real>(blocks: &[Block<F>], x: Mat<F>, heads: usize) -> (Mat<F>, Vec<BlockCache<F>>) {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks {
        let (y, c) = b.forward(&h, heads);
        caches.push(c);
        h = y;
    }
    (h, caches)
}

pub fn blocks_backward<F: Real>(
    blocks: &[Block<F>],
    caches: &[BlockCache<F>],
    dy: Mat<F>,
    grads: &mut [Block<F>],
) -> Mat<F> {
    let mut d = dy;
    for ((b, c), g) in blocks.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d = b.backward(c, &d, g);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> crate::rng::Rng {
        crate::rng::seeded(1)
    }

    fn check<P: ParamVisit<f64> + Clone>(params: &P, analytic: &P, mut loss: impl FnMut(&P) -> f64) {
        let h = 1e-5;
        let grads = analytic.named();
        for (ti, (name, g)) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut p = params.clone();
                p.named_mut()[ti].1.data[i] += h;
                let up = loss(&p);
                p.named_mut()[ti].1.data[i] -= 2.0 * h;
                let down = loss(&p);
                let num = (up - down) / (2.0 * h);
                let a = g.data[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a} numeric {num}");
            }
        }
    }

    fn weighted_sum(y: &Mat<f64>) -> f64 {
        y.data.iter().enumerate().map(|(i, v)| v * ((i % 7) as f64 - 3.0) * 0.3).sum()
    }

    fn weights_like(y: &Mat<f64>) -> Mat<f64> {
        Mat::from_vec(y.rows, y.cols, (0..y.len()).map(|i| ((i % 7) as f64 - 3.0) * 0.3).collect())
    }

    #[test]
    fn matmul_variants_agree() {
        let mut r = rng();
        let a: Mat<f64> = Mat::normal(3, 4, 1.0, &mut r);
        let b: Mat<f64> = Mat::normal(4, 5, 1.0, &mut r);
        let bt = Mat::from_vec(5, 4, (0..20).map(|i| b.data[(i % 4) * 5 + i / 4]).collect());
        let ab = a.matmul(&b);
        let ab2 = a.matmul_t(&bt);
        for (x, y) in ab.data.iter().zip(&ab2.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = Mat::from_vec(4, 3, (0..12).map(|i| a.data[(i % 3) * 4 + i / 3]).collect());
        let c: Mat<f64> = Mat::normal(3, 2, 1.0, &mut r);
        let x1 = a.t_matmul(&c);
        let x2 = at.matmul(&c);
        for (x, y) in x1.data.iter().zip(&x2.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradients() {
        let mut r = rng();
        let mut block: Block<f64> = Block::new(8, 16, &mut r);
        block.visit_mut("", &mut |_, m| {
            for v in m.data.iter_mut() {
                *v += 0.1 * r.random_range(-1.0..1.0);
            }
        });
        let x: Mat<f64> = Mat::normal(5, 8, 1.0, &mut r);
        let (y, cache) = block.forward(&x, 2);
        let mut grad = zeros_like(&block);
        let dx = block.backward(&cache, &weights_like(&y), &mut grad);
        check(&block, &grad, |b| weighted_sum(&b.forward(&x, 2).0));

        // input gradient
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = weighted_sum(&block.forward(&xp, 2).0);
            xp.data[i] -= 2.0 * h;
            let down = weighted_sum(&block.forward(&xp, 2).0);
            let num = (up - down) / (2.0 * h);
            assert!((dx.data[i] - num).abs() < 1e-6 * num.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m: Mat<f64> = Mat::normal(4, 6, 3.0, &mut rng());
        softmax_rows(&mut m);
        for r in 0..4 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_selection() {
        assert!(decays("encoder.blocks.0.attn.qkv.weight"));
        assert!(!decays("encoder.blocks.0.attn.qkv.bias"));
        assert!(!decays("encoder.blocks.0.norm1.weight"));
        assert!(!decays("encoder.pos_spatial"));
    }
}
