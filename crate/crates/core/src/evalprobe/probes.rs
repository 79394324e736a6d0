use rand::Rng;

use crate::error::{Error, Result};
use crate::mae::MaeParams;
use crate::nn::{join, softmax_rows, Linear, Mat, ParamVisit};
use crate::token::PatchTensor;

/// One probe input: a set of token features and their `(t, s)` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeInput {
    pub tokens: Mat<f64>,
    pub index: Vec<(usize, usize)>,
}

impl ProbeInput {
    /// A single feature vector as a one-token set.
    pub fn vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Self { tokens: Mat::from_vec(1, n, v), index: vec![(0, 0)] }
    }

    /// Raw patch values of a tokenized clip.
    pub fn from_patches(t: &PatchTensor) -> Self {
        let data = t.tokens.iter().map(|&x| x as f64).collect();
        Self { tokens: Mat::from_vec(t.n_tokens(), t.patch_dim, data), index: t.index.clone() }
    }

    /// Frozen encoder features of a fully observed clip.
    pub fn encoded(params: &MaeParams<f32>, cfg: &crate::mae::MaeConfig, t: &PatchTensor) -> Result<Self> {
        let z = crate::mae::encode(params, cfg, t)?;
        Ok(Self { tokens: z.cast(), index: t.index.clone() })
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols
    }
}

/// A trainable classifier over [`ProbeInput`]s.
pub trait Probe: ParamVisit<f64> + Clone + Send + Sync {
    fn logits(&self, x: &ProbeInput) -> Vec<f64>;

    /// Cross-entropy for one sample, accumulating `d loss / d params` into
    /// `grad`.
    fn loss_grad(&self, x: &ProbeInput, label: usize, grad: &mut Self) -> f64;
}

/// Softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[label];
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[label] -= 1.0;
    (loss, d)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Cross-attention pooling with one learned query, then a linear head.
/// Keys and values are linear projections of the tokens; heads split the
/// feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveProbe {
    pub query: Mat<f64>,
    pub key: Linear<f64>,
    pub value: Linear<f64>,
    pub head: Linear<f64>,
    pub heads: usize,
}

struct PoolCache {
    k: Mat<f64>,
    v: Mat<f64>,
    /// `[heads, n_tokens]`
    attn: Mat<f64>,
    pooled: Mat<f64>,
}

impl AttentiveProbe {
    pub fn new(dim: usize, classes: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("probe dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Mat::normal(1, dim, 0.02, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            head: Linear::zeros(dim, classes),
            heads,
        })
    }

    fn head_dim(&self) -> usize {
        self.query.cols / self.heads
    }

    fn pool_cached(&self, x: &Mat<f64>) -> PoolCache {
        let (k, v) = (self.key.forward(x), self.value.forward(x));
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Mat::zeros(self.heads, x.rows);
        for h in 0..self.heads {
            let q = &self.query.data[h * dh..(h + 1) * dh];
            for n in 0..x.rows {
                let kr = &k.row(n)[h * dh..(h + 1) * dh];
                attn.data[h * x.rows + n] = q.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
        }
        softmax_rows(&mut attn);
        let mut pooled = Mat::zeros(1, self.query.cols);
        for h in 0..self.heads {
            for n in 0..x.rows {
                let a = attn.data[h * x.rows + n];
                for j in h * dh..(h + 1) * dh {
                    pooled.data[j] += a * v.data[n * v.cols + j];
                }
            }
        }
        PoolCache { k, v, attn, pooled }
    }

    /// Attention weights `[heads, n_tokens]`.
    pub fn attention(&self, x: &Mat<f64>) -> Mat<f64> {
        self.pool_cached(x).attn
    }

    pub fn pool(&self, x: &Mat<f64>) -> Vec<f64> {
        self.pool_cached(x).pooled.data
    }

    /// Backward from `d loss / d logits`; returns `d loss / d tokens`.
    fn backward(&self, x: &Mat<f64>, c: &PoolCache, dlogits: Vec<f64>, g: &mut Self) -> Mat<f64> {
        let dl = Mat::from_vec(1, dlogits.len(), dlogits);
        let dpooled = self.head.backward(&c.pooled, &dl, &mut g.head);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = x.rows;
        let mut dk = Mat::zeros(n, c.k.cols);
        let mut dv = Mat::zeros(n, c.v.cols);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &c.attn.data[h * n..(h + 1) * n];
            let dp = &dpooled.data[cols.clone()];
            let da: Vec<f64> =
                (0..n).map(|i| c.v.row(i)[cols.clone()].iter().zip(dp).map(|(v, d)| v * d).sum()).collect();
            let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let q = &self.query.data[cols.clone()];
            for i in 0..n {
                let ds = a[i] * (da[i] - dot) * scale;
                for (j, col) in cols.clone().enumerate() {
                    dv.data[i * dv.cols + col] += a[i] * dp[j];
                    dk.data[i * dk.cols + col] += ds * q[j];
                    g.query.data[col] += ds * c.k.data[i * c.k.cols + col];
                }
            }
        }
        let mut dx = self.key.backward(x, &dk, &mut g.key);
        dx.add_(&self.value.backward(x, &dv, &mut g.value));
        dx
    }
}

impl ParamVisit<f64> for AttentiveProbe {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<f64>)) {
        f(join(prefix, "query"), &self.query);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<f64>)) {
        f(join(prefix, "query"), &mut self.query);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl Probe for AttentiveProbe {
    fn logits(&self, x: &ProbeInput) -> Vec<f64> {
        self.head.forward(&self.pool_cached(&x.tokens).pooled).data
    }

    fn loss_grad(&self, x: &ProbeInput, label: usize, grad: &mut Self) -> f64 {
        let c = self.pool_cached(&x.tokens);
        let (loss, dl) = cross_entropy(&self.head.forward(&c.pooled).data, label);
        self.backward(&x.tokens, &c, dl, grad);
        loss
    }
}

/// Linear classifier on the token mean (the vector itself for one token).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub head: Linear<f64>,
}

impl LinearProbe {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self { head: Linear::zeros(dim, classes) }
    }

    fn mean(x: &Mat<f64>) -> Mat<f64> {
        let mut m = Mat::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in m.data.iter_mut().zip(x.row(r)) {
                *o += v / x.rows as f64;
            }
        }
        m
    }
}

impl ParamVisit<f64> for LinearProbe {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<f64>)) {
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<f64>)) {
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl Probe for LinearProbe {
    fn logits(&self, x: &ProbeInput) -> Vec<f64> {
        self.head.forward(&Self::mean(&x.tokens)).data
    }

    fn loss_grad(&self, x: &ProbeInput, label: usize, grad: &mut Self) -> f64 {
        let m = Self::mean(&x.tokens);
        let (loss, dl) = cross_entropy(&self.head.forward(&m).data, label);
        self.head.backward(&m, &Mat::from_vec(1, dl.len(), dl), &mut grad.head);
        loss
    }
}

/// Baseline without transformer blocks: a learned patch embedding plus
/// factorized position tables, trained jointly with an attentive probe on
/// raw patch values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedProbe {
    pub embed: Linear<f64>,
    pub pos_t: Mat<f64>,
    pub pos_s: Mat<f64>,
    pub probe: AttentiveProbe,
}

impl PatchEmbedProbe {
    pub fn new(
        patch_dim: usize,
        grid_t: usize,
        n_spatial: usize,
        dim: usize,
        classes: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            embed: Linear::new(patch_dim, dim, rng),
            pos_t: Mat::normal(grid_t, dim, 0.02, rng),
            pos_s: Mat::normal(n_spatial, dim, 0.02, rng),
            probe: AttentiveProbe::new(dim, classes, heads, rng)?,
        })
    }

    /// Embedded tokens, one row per input token.
    pub fn embed_tokens(&self, x: &ProbeInput) -> Result<Mat<f64>> {
        if x.dim() != self.embed.weight.cols {
            return Err(Error::Dimension(format!(
                "patch dim {} does not match embedding input {}",
                x.dim(),
                self.embed.weight.cols
            )));
        }
        if let Some(&(t, s)) = x.index.iter().find(|&&(t, s)| t >= self.pos_t.rows || s >= self.pos_s.rows) {
            return Err(Error::Dimension(format!("token ({t}, {s}) outside the position tables")));
        }
        let mut e = self.embed.forward(&x.tokens);
        for (i, &(t, s)) in x.index.iter().enumerate() {
            for ((o, a), b) in e.row_mut(i).iter_mut().zip(self.pos_t.row(t)).zip(self.pos_s.row(s)) {
                *o += a + b;
            }
        }
        Ok(e)
    }
}

impl ParamVisit<f64> for PatchEmbedProbe {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<f64>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(join(prefix, "pos_temporal"), &self.pos_t);
        f(join(prefix, "pos_spatial"), &self.pos_s);
        self.probe.visit(&join(prefix, "probe"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<f64>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(join(prefix, "pos_temporal"), &mut self.pos_t);
        f(join(prefix, "pos_spatial"), &mut self.pos_s);
        self.probe.visit_mut(&join(prefix, "probe"), f);
    }
}

impl Probe for PatchEmbedProbe {
    fn logits(&self, x: &ProbeInput) -> Vec<f64> {
        let e = self.embed_tokens(x).expect("probe input checked against layout");
        self.probe.logits(&ProbeInput { tokens: e, index: x.index.clone() })
    }

    fn loss_grad(&self, x: &ProbeInput, label: usize, grad: &mut Self) -> f64 {
        let e = self.embed_tokens(x).expect("probe input checked against layout");
        let c = self.probe.pool_cached(&e);
        let (loss, dl) = cross_entropy(&self.probe.head.forward(&c.pooled).data, label);
        let de = self.probe.backward(&e, &c, dl, &mut grad.probe);
        for (i, &(t, s)) in x.index.iter().enumerate() {
            for (j, &d) in de.row(i).iter().enumerate() {
                grad.pos_t.data[t * de.cols + j] += d;
                grad.pos_s.data[s * de.cols + j] += d;
            }
        }
        self.embed.backward(&x.tokens, &de, &mut grad.embed);
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like;
    use crate::rng;

    fn input(n: usize, d: usize, seed: u64) -> ProbeInput {
        let mut r = rng::seeded(seed);
        ProbeInput { tokens: Mat::normal(n, d, 1.0, &mut r), index: (0..n).map(|i| (i % 2, i / 2)).collect() }
    }

    fn fd_check<P: Probe>(p: &P, x: &ProbeInput, label: usize) {
        let mut g = zeros_like(p);
        p.loss_grad(x, label, &mut g);
        let names = g.named().into_iter().map(|(n, m)| (n, m.clone())).collect::<Vec<_>>();
        let h = 1e-5;
        for (ti, (name, gm)) in names.iter().enumerate() {
            for i in 0..gm.data.len() {
                let mut q = p.clone();
                q.named_mut()[ti].1.data[i] += h;
                let up = cross_entropy(&q.logits(x), label).0;
                q.named_mut()[ti].1.data[i] -= 2.0 * h;
                let down = cross_entropy(&q.logits(x), label).0;
                let num = (up - down) / (2.0 * h);
                let a = gm.data[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a} numeric {num}");
            }
        }
    }

    fn randomize<P: ParamVisit<f64>>(p: &mut P, seed: u64) {
        let mut r = rng::seeded(seed);
        p.visit_mut("", &mut |_, m| {
            for x in m.data.iter_mut() {
                *x = r.random_range(-0.5..0.5);
            }
        });
    }

    #[test]
    fn attentive_gradients() {
        for heads in [1, 2] {
            let mut p = AttentiveProbe::new(4, 3, heads, &mut rng::seeded(1)).unwrap();
            randomize(&mut p, 2);
            fd_check(&p, &input(5, 4, 3), 1);
        }
    }

    #[test]
    fn patch_embed_gradients() {
        let mut p = PatchEmbedProbe::new(3, 2, 3, 4, 2, 2, &mut rng::seeded(1)).unwrap();
        randomize(&mut p, 4);
        fd_check(&p, &input(6, 3, 5), 0);
    }

    #[test]
    fn linear_gradients() {
        let mut p = LinearProbe::new(4, 3);
        randomize(&mut p, 6);
        fd_check(&p, &input(3, 4, 7), 2);
    }

    #[test]
    fn single_token_pools_to_its_value() {
        let p = AttentiveProbe::new(4, 2, 2, &mut rng::seeded(1)).unwrap();
        let x = input(1, 4, 2);
        let v = p.value.forward(&x.tokens);
        for (a, b) in p.pool(&x.tokens).iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-15);
        }
        let same = Mat::from_vec(3, 4, x.tokens.data.repeat(3));
        for (a, b) in p.pool(&same).iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = p.attention(&input(7, 4, 9).tokens);
        for h in 0..2 {
            assert!((a.row(h).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_patches_embed_to_positions_plus_bias() {
        let mut p = PatchEmbedProbe::new(3, 2, 3, 4, 2, 1, &mut rng::seeded(1)).unwrap();
        p.embed.bias.data = vec![0.1, 0.2, 0.3, 0.4];
        let x = ProbeInput { tokens: Mat::zeros(6, 3), index: (0..6).map(|i| (i / 3, i % 3)).collect() };
        let e = p.embed_tokens(&x).unwrap();
        assert_eq!(e.rows, 6);
        for (i, &(t, s)) in x.index.iter().enumerate() {
            for j in 0..4 {
                let want = p.pos_t.row(t)[j] + p.pos_s.row(s)[j] + p.embed.bias.data[j];
                assert!((e.row(i)[j] - want).abs() < 1e-15);
            }
        }
        let bad = ProbeInput { tokens: Mat::zeros(1, 2), index: vec![(0, 0)] };
        assert!(matches!(p.embed_tokens(&bad), Err(Error::Dimension(_))));
    }
}
