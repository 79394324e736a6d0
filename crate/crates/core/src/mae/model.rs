use std::sync::Arc;

use rayon::prelude::*;

use super::config::{MaeConfig, ModelShape};
use crate::error::{Error, Result};
use crate::nn::{
    blocks_backward, blocks_forward, join, zeros_like, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Mat,
    ParamVisit, Real,
};
use crate::prep::FlatClip;
use crate::rng;
use crate::token::{patchify, unpatchify, MaskPlan, PatchLayout, PatchTensor};

/// Encoder and decoder parameters. Position embeddings are factorized: the
/// vector for token `(t, s)` is `pos_temporal[t] + pos_spatial[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeParams<F> {
    pub patch_embed: Linear<F>,
    pub enc_pos_t: Mat<F>,
    pub enc_pos_s: Mat<F>,
    pub enc_blocks: Vec<Block<F>>,
    pub enc_norm: LayerNorm<F>,
    pub dec_embed: Linear<F>,
    pub mask_token: Mat<F>,
    pub dec_pos_t: Mat<F>,
    pub dec_pos_s: Mat<F>,
    pub dec_blocks: Vec<Block<F>>,
    pub dec_norm: LayerNorm<F>,
    pub head: Linear<F>,
}

impl<F> ParamVisit<F> for MaeParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        self.patch_embed.visit(&join(prefix, "encoder.patch_embed"), f);
        f(join(prefix, "encoder.pos_temporal"), &self.enc_pos_t);
        f(join(prefix, "encoder.pos_spatial"), &self.enc_pos_s);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.blocks.{i}")), f);
        }
        self.enc_norm.visit(&join(prefix, "encoder.norm"), f);
        self.dec_embed.visit(&join(prefix, "decoder.embed"), f);
        f(join(prefix, "decoder.mask_token"), &self.mask_token);
        f(join(prefix, "decoder.pos_temporal"), &self.dec_pos_t);
        f(join(prefix, "decoder.pos_spatial"), &self.dec_pos_s);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.blocks.{i}")), f);
        }
        self.dec_norm.visit(&join(prefix, "decoder.norm"), f);
        self.head.visit(&join(prefix, "decoder.head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        self.patch_embed.visit_mut(&join(prefix, "encoder.patch_embed"), f);
        f(join(prefix, "encoder.pos_temporal"), &mut self.enc_pos_t);
        f(join(prefix, "encoder.pos_spatial"), &mut self.enc_pos_s);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.blocks.{i}")), f);
        }
        self.enc_norm.visit_mut(&join(prefix, "encoder.norm"), f);
        self.dec_embed.visit_mut(&join(prefix, "decoder.embed"), f);
        f(join(prefix, "decoder.mask_token"), &mut self.mask_token);
        f(join(prefix, "decoder.pos_temporal"), &mut self.dec_pos_t);
        f(join(prefix, "decoder.pos_spatial"), &mut self.dec_pos_s);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.blocks.{i}")), f);
        }
        self.dec_norm.visit_mut(&join(prefix, "decoder.norm"), f);
        self.head.visit_mut(&join(prefix, "decoder.head"), f);
    }
}

const POS_STD: f64 = 0.02;

impl<F: Real> MaeParams<F> {
    /// Xavier-uniform linear weights, zero biases, unit norms, N(0, 0.02^2)
    /// position tables and a zero mask token.
    pub fn init(cfg: &MaeConfig, shape: &ModelShape, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let (e, d) = (cfg.enc_dim, cfg.dec_dim);
        Ok(Self {
            patch_embed: Linear::new(shape.patch_dim, e, &mut rng),
            enc_pos_t: Mat::normal(shape.grid_t, e, POS_STD, &mut rng),
            enc_pos_s: Mat::normal(shape.n_spatial, e, POS_STD, &mut rng),
            enc_blocks: (0..cfg.enc_depth).map(|_| Block::new(e, cfg.enc_hidden(), &mut rng)).collect(),
            enc_norm: LayerNorm::new(e),
            dec_embed: Linear::new(e, d, &mut rng),
            mask_token: Mat::zeros(1, d),
            dec_pos_t: Mat::normal(shape.grid_t, d, POS_STD, &mut rng),
            dec_pos_s: Mat::normal(shape.n_spatial, d, POS_STD, &mut rng),
            dec_blocks: (0..cfg.dec_depth).map(|_| Block::new(d, cfg.dec_hidden(), &mut rng)).collect(),
            dec_norm: LayerNorm::new(d),
            head: Linear::new(d, shape.patch_dim, &mut rng),
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            grid_t: self.enc_pos_t.rows,
            n_spatial: self.enc_pos_s.rows,
            patch_dim: self.patch_embed.weight.cols,
        }
    }

    pub fn cast<G: Real>(&self) -> MaeParams<G> {
        let lin = |l: &Linear<F>| Linear { weight: l.weight.cast(), bias: l.bias.cast() };
        let ln = |l: &LayerNorm<F>| LayerNorm { weight: l.weight.cast(), bias: l.bias.cast() };
        let blk = |b: &Block<F>| Block {
            norm1: ln(&b.norm1),
            attn: crate::nn::Attention { qkv: lin(&b.attn.qkv), proj: lin(&b.attn.proj) },
            norm2: ln(&b.norm2),
            fc1: lin(&b.fc1),
            fc2: lin(&b.fc2),
        };
        MaeParams {
            patch_embed: lin(&self.patch_embed),
            enc_pos_t: self.enc_pos_t.cast(),
            enc_pos_s: self.enc_pos_s.cast(),
            enc_blocks: self.enc_blocks.iter().map(blk).collect(),
            enc_norm: ln(&self.enc_norm),
            dec_embed: lin(&self.dec_embed),
            mask_token: self.mask_token.cast(),
            dec_pos_t: self.dec_pos_t.cast(),
            dec_pos_s: self.dec_pos_s.cast(),
            dec_blocks: self.dec_blocks.iter().map(blk).collect(),
            dec_norm: ln(&self.dec_norm),
            head: lin(&self.head),
        }
    }

    pub fn encoder_param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |name, m| {
            if name.starts_with("encoder.") {
                n += m.len()
            }
        });
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, m| ok &= m.data.iter().all(|x| x.is_finite()));
        ok
    }
}

fn check_inputs<F: Real>(params: &MaeParams<F>, tokens: &PatchTensor, plan: &MaskPlan) -> Result<()> {
    let shape = params.shape();
    if tokens.patch_dim != shape.patch_dim || tokens.n_tokens() != shape.grid_t * shape.n_spatial {
        return Err(Error::Dimension(format!(
            "{} tokens of dim {} for a model built on {}x{} tokens of dim {}",
            tokens.n_tokens(),
            tokens.patch_dim,
            shape.grid_t,
            shape.n_spatial,
            shape.patch_dim
        )));
    }
    if plan.visible.len() + plan.masked.len() != tokens.n_tokens() {
        return Err(Error::Dimension(format!(
            "mask plan covers {} + {} tokens, clip has {}",
            plan.visible.len(),
            plan.masked.len(),
            tokens.n_tokens()
        )));
    }
    if let Some(&(t, s)) =
        plan.visible.iter().chain(&plan.masked).find(|&&(t, s)| t >= shape.grid_t || s >= shape.n_spatial)
    {
        return Err(Error::Dimension(format!("mask plan references token ({t}, {s}) outside the layout")));
    }
    Ok(())
}

fn token_rows<F: Real>(tokens: &PatchTensor, ids: &[(usize, usize)], n_spatial: usize) -> Mat<F> {
    let d = tokens.patch_dim;
    let mut m = Mat::zeros(ids.len(), d);
    for (i, &(t, s)) in ids.iter().enumerate() {
        for (o, &x) in m.row_mut(i).iter_mut().zip(tokens.token(t * n_spatial + s)) {
            *o = F::of(x as f64);
        }
    }
    m
}

fn add_pos<F: Real>(x: &mut Mat<F>, ids: &[(usize, usize)], pos_t: &Mat<F>, pos_s: &Mat<F>) {
    for (i, &(t, s)) in ids.iter().enumerate() {
        let row = x.row_mut(i);
        for ((o, &a), &b) in row.iter_mut().zip(pos_t.row(t)).zip(pos_s.row(s)) {
            *o += a + b;
        }
    }
}

fn pos_backward<F: Real>(dx: &Mat<F>, ids: &[(usize, usize)], gt: &mut Mat<F>, gs: &mut Mat<F>) {
    for (i, &(t, s)) in ids.iter().enumerate() {
        for (c, &d) in dx.row(i).iter().enumerate() {
            gt.data[t * gt.cols + c] += d;
            gs.data[s * gs.cols + c] += d;
        }
    }
}

struct EncoderCache<F> {
    x: Mat<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
}

fn encoder_forward<F: Real>(
    params: &MaeParams<F>,
    cfg: &MaeConfig,
    tokens: &PatchTensor,
    ids: &[(usize, usize)],
) -> (Mat<F>, EncoderCache<F>) {
    let x = token_rows(tokens, ids, params.enc_pos_s.rows);
    let mut e = params.patch_embed.forward(&x);
    add_pos(&mut e, ids, &params.enc_pos_t, &params.enc_pos_s);
    let (h, blocks) = blocks_forward(&params.enc_blocks, e, cfg.enc_heads);
    let (z, norm) = params.enc_norm.forward(&h);
    (z, EncoderCache { x, blocks, norm })
}

/// Encoder features `[n_tokens, enc_dim]` for a fully observed clip, in
/// token order.
pub fn encode<F: Real>(params: &MaeParams<F>, cfg: &MaeConfig, tokens: &PatchTensor) -> Result<Mat<F>> {
    let plan = MaskPlan { visible: tokens.index.clone(), masked: Vec::new(), ratio: 0.0, seed: 0 };
    check_inputs(params, tokens, &plan)?;
    Ok(encoder_forward(params, cfg, tokens, &plan.visible).0)
}

/// Targets and validity of the masked tokens, standardized per patch when
/// `norm_pix_loss` is on.
fn masked_targets<F: Real>(
    cfg: &MaeConfig,
    tokens: &PatchTensor,
    masked: &[(usize, usize)],
    n_spatial: usize,
) -> (Mat<F>, Vec<bool>) {
    let d = tokens.patch_dim;
    let mut target = token_rows::<F>(tokens, masked, n_spatial);
    let mut valid = Vec::with_capacity(masked.len() * d);
    for (i, &(t, s)) in masked.iter().enumerate() {
        let v = tokens.token_valid(t * n_spatial + s);
        valid.extend_from_slice(v);
        if cfg.norm_pix_loss {
            let row = target.row_mut(i);
            let st = crate::prep::Affine::standardize(row.iter().zip(v).filter(|(_, &ok)| ok).map(|(x, _)| x.f64()));
            let rs = if st.scale == 0.0 { 0.0 } else { 1.0 / (1.0 / (st.scale * st.scale) + 1e-6).sqrt() };
            for (x, &ok) in row.iter_mut().zip(v) {
                *x = if ok { F::of((x.f64() - st.shift) * rs) } else { F::zero() };
            }
        }
    }
    (target, valid)
}

fn masked_residual<F: Real>(
    cfg: &MaeConfig,
    predictions: &Mat<F>,
    target: &PatchTensor,
    masked: &[(usize, usize)],
    n_spatial: usize,
) -> (Mat<F>, F, usize) {
    let (target, valid) = masked_targets::<F>(cfg, target, masked, n_spatial);
    let mut residual = Mat::zeros(masked.len(), target.cols);
    let mut sse = F::zero();
    let mut count = 0;
    for (k, &ok) in valid.iter().enumerate() {
        if ok {
            let r = predictions.data[k] - target.data[k];
            residual.data[k] = r;
            sse += r * r;
            count += 1;
        }
    }
    (residual, sse, count)
}

/// MSE between predictions for `plan.masked` and the valid pixels of the
/// same tokens in `target`. Nothing else in `target` is read.
pub fn reconstruction_loss<F: Real>(
    cfg: &MaeConfig,
    predictions: &Mat<F>,
    target: &PatchTensor,
    plan: &MaskPlan,
    n_spatial: usize,
) -> Result<F> {
    if predictions.rows != plan.masked.len() || predictions.cols != target.patch_dim {
        return Err(Error::Dimension(format!(
            "{}x{} predictions for {} masked tokens of dim {}",
            predictions.rows,
            predictions.cols,
            plan.masked.len(),
            target.patch_dim
        )));
    }
    let (_, sse, count) = masked_residual(cfg, predictions, target, &plan.masked, n_spatial);
    Ok(if count == 0 { F::zero() } else { sse / F::of(count as f64) })
}

/// Per-sample result: predictions for masked tokens and the summed squared
/// error over their valid pixels.
pub struct SampleLoss<F> {
    pub predictions: Mat<F>,
    pub sse: F,
    pub count: usize,
}

struct SampleCache<F> {
    enc: EncoderCache<F>,
    z: Mat<F>,
    dec_blocks: Vec<BlockCache<F>>,
    dec_norm: LayerNormCache<F>,
    ym: Mat<F>,
    residual: Mat<F>,
}

fn sample_forward<F: Real>(
    params: &MaeParams<F>,
    cfg: &MaeConfig,
    tokens: &PatchTensor,
    plan: &MaskPlan,
) -> Result<(SampleLoss<F>, SampleCache<F>)> {
    check_inputs(params, tokens, plan)?;
    let n_spatial = params.enc_pos_s.rows;
    let (nv, nm) = (plan.visible.len(), plan.masked.len());
    let (z, enc) = encoder_forward(params, cfg, tokens, &plan.visible);

    let dv = params.dec_embed.forward(&z);
    let dd = cfg.dec_dim;
    let mut din = Mat::zeros(nv + nm, dd);
    din.data[..nv * dd].copy_from_slice(&dv.data);
    for i in 0..nm {
        din.row_mut(nv + i).copy_from_slice(&params.mask_token.data);
    }
    let ids: Vec<(usize, usize)> = plan.visible.iter().chain(&plan.masked).copied().collect();
    add_pos(&mut din, &ids, &params.dec_pos_t, &params.dec_pos_s);
    let (h, dec_blocks) = blocks_forward(&params.dec_blocks, din, cfg.dec_heads);
    let (y, dec_norm) = params.dec_norm.forward(&h);
    let ym = Mat::from_vec(nm, dd, y.data[nv * dd..].to_vec());
    let predictions = params.head.forward(&ym);

    let (residual, sse, count) = masked_residual(cfg, &predictions, tokens, &plan.masked, n_spatial);
    if !sse.is_finite() {
        return Err(Error::Numeric { step: 0, what: "non-finite reconstruction error".into() });
    }
    Ok((SampleLoss { predictions, sse, count }, SampleCache { enc, z, dec_blocks, dec_norm, ym, residual }))
}

fn sample_backward<F: Real>(params: &MaeParams<F>, plan: &MaskPlan, cache: &SampleCache<F>, dsse: F) -> MaeParams<F> {
    let mut g = zeros_like(params);
    let nv = plan.visible.len();
    let dd = params.mask_token.cols;

    let mut dpred = cache.residual.clone();
    dpred.scale_(F::of(2.0) * dsse);
    let dym = params.head.backward(&cache.ym, &dpred, &mut g.head);
    let mut dy = Mat::zeros(nv + plan.masked.len(), dd);
    dy.data[nv * dd..].copy_from_slice(&dym.data);
    let dh = params.dec_norm.backward(&cache.dec_norm, &dy, &mut g.dec_norm);
    let ddin = blocks_backward(&params.dec_blocks, &cache.dec_blocks, dh, &mut g.dec_blocks);

    let ids: Vec<(usize, usize)> = plan.visible.iter().chain(&plan.masked).copied().collect();
    pos_backward(&ddin, &ids, &mut g.dec_pos_t, &mut g.dec_pos_s);
    for i in nv..ddin.rows {
        for (m, &d) in g.mask_token.data.iter_mut().zip(ddin.row(i)) {
            *m += d;
        }
    }
    let ddv = Mat::from_vec(nv, dd, ddin.data[..nv * dd].to_vec());
    let dz = params.dec_embed.backward(&cache.z, &ddv, &mut g.dec_embed);
    let dhe = params.enc_norm.backward(&cache.enc.norm, &dz, &mut g.enc_norm);
    let de = blocks_backward(&params.enc_blocks, &cache.enc.blocks, dhe, &mut g.enc_blocks);
    pos_backward(&de, &plan.visible, &mut g.enc_pos_t, &mut g.enc_pos_s);
    params.patch_embed.backward(&cache.enc.x, &de, &mut g.patch_embed);
    g
}

/// Single-sample forward: predictions for the masked tokens (in
/// `plan.masked` order) and the MSE over their valid pixels.
pub fn forward<F: Real>(
    params: &MaeParams<F>,
    cfg: &MaeConfig,
    tokens: &PatchTensor,
    plan: &MaskPlan,
) -> Result<(Mat<F>, F)> {
    let (out, _) = sample_forward(params, cfg, tokens, plan)?;
    let loss = if out.count == 0 { F::zero() } else { out.sse / F::of(out.count as f64) };
    Ok((out.predictions, loss))
}

/// Batch loss and gradients. The loss is the mean squared error over all
/// `(masked token, valid pixel)` pairs of the batch, multiplied by
/// `loss_scale`. Samples run in parallel; per-sample gradients are summed in
/// batch order so the result does not depend on thread count.
pub fn loss_and_grad<F: Real>(
    params: &MaeParams<F>,
    cfg: &MaeConfig,
    batch: &[(PatchTensor, MaskPlan)],
    loss_scale: F,
    step: u64,
) -> Result<(F, MaeParams<F>)> {
    let with_step = |e: Error| match e {
        Error::Numeric { what, .. } => Error::Numeric { step, what },
        e => e,
    };
    let outs: Vec<(SampleLoss<F>, SampleCache<F>)> =
        batch.par_iter().map(|(t, p)| sample_forward(params, cfg, t, p)).collect::<Result<_>>().map_err(with_step)?;
    let count: usize = outs.iter().map(|(o, _)| o.count).sum();
    let mut grads = zeros_like(params);
    if count == 0 {
        return Ok((F::zero(), grads));
    }
    let sse: F = outs.iter().map(|(o, _)| o.sse).sum();
    let dsse = loss_scale / F::of(count as f64);
    let sample_grads: Vec<MaeParams<F>> = outs
        .par_iter()
        .zip(batch.par_iter())
        .map(|((_, cache), (_, plan))| sample_backward(params, plan, cache, dsse))
        .collect();
    for g in &sample_grads {
        crate::nn::accumulate(&mut grads, g);
    }
    let loss = loss_scale * sse / F::of(count as f64);
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric { step, what: "non-finite loss or gradient".into() });
    }
    Ok((loss, grads))
}

/// Fills masked tokens with model predictions and passes visible tokens
/// through from the input clip.
pub fn reconstruct<F: Real>(
    params: &MaeParams<F>,
    cfg: &MaeConfig,
    layout: &PatchLayout,
    clip: &FlatClip,
    plan: &MaskPlan,
) -> Result<FlatClip> {
    let mut tokens = patchify(clip, layout)?;
    let (pred, _) = forward(params, cfg, &tokens, plan)?;
    let n_spatial = layout.n_spatial();
    for (i, &(t, s)) in plan.masked.iter().enumerate() {
        let k = t * n_spatial + s;
        let d = tokens.patch_dim;
        let (shift, scale) = if cfg.norm_pix_loss {
            let st = crate::prep::Affine::standardize(
                tokens.token(k).iter().zip(tokens.token_valid(k)).filter(|(_, &ok)| ok).map(|(&x, _)| x as f64),
            );
            let std = if st.scale == 0.0 { 0.0 } else { 1.0 / st.scale };
            (st.shift, (std * std + 1e-6).sqrt())
        } else {
            (0.0, 1.0)
        };
        for j in 0..d {
            if tokens.pixel_valid[k * d + j] {
                tokens.tokens[k * d + j] = (pred.data[i * d + j].f64() * scale + shift) as f32;
            }
        }
    }
    let mut out = unpatchify(&tokens, layout)?;
    out.start_second = clip.start_second;
    out.mask = Arc::clone(&clip.mask);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatgeo::ValidMask;
    use crate::token::{build_layout, make_mask};

    pub(crate) fn tiny() -> MaeConfig {
        MaeConfig {
            enc_dim: 8,
            enc_depth: 2,
            enc_heads: 2,
            dec_dim: 4,
            dec_depth: 2,
            dec_heads: 2,
            p_t: 2,
            p: 2,
            mlp_ratio: 1.0,
            norm_pix_loss: false,
        }
    }

    fn setup() -> (PatchLayout, FlatClip) {
        use rand::Rng;
        let mask = Arc::new(ValidMask::from_fn(4, 6, |r, c| !(r == 0 && c < 2) && !(r == 3 && c == 5)));
        let layout = build_layout(&mask, 2, 2, 4).unwrap();
        let mut rng = rng::seeded(3);
        let frames =
            (0..4 * 24).map(|i| if mask.as_slice()[i % 24] { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        (layout, FlatClip::new(frames, mask, 0.0).unwrap())
    }

    #[test]
    fn param_count_matches_allocation() {
        let (layout, _) = setup();
        let shape = ModelShape::of(&layout);
        let p: MaeParams<f32> = MaeParams::init(&tiny(), &shape, 0).unwrap();
        assert_eq!(p.num_params(), super::super::config::param_count(&tiny(), &shape));
        assert_eq!(p.encoder_param_count(), super::super::config::encoder_param_count(&tiny(), &shape));
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        // a zero head with the target clip set to zero
        let (layout, clip) = setup();
        let mut params: MaeParams<f64> = MaeParams::init(&tiny(), &ModelShape::of(&layout), 1).unwrap();
        params.head = Linear::zeros(4, layout.patch_dim());
        let zero = FlatClip::new(vec![0.0; clip.frames.len()], clip.mask.clone(), 0.0).unwrap();
        let tokens = patchify(&zero, &layout).unwrap();
        let plan = make_mask(&layout, 0.5, 2).unwrap();
        let (_, loss) = forward(&params, &tiny(), &tokens, &plan).unwrap();
        assert_eq!(loss, 0.0);
        let (_, g) = loss_and_grad(&params, &tiny(), &[(tokens, plan)], 1.0, 0).unwrap();
        assert!(g.head.bias.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn doubling_loss_scale_doubles_gradients() {
        let (layout, clip) = setup();
        let params: MaeParams<f64> = MaeParams::init(&tiny(), &ModelShape::of(&layout), 1).unwrap();
        let batch = vec![(patchify(&clip, &layout).unwrap(), make_mask(&layout, 0.5, 7).unwrap())];
        let (l1, g1) = loss_and_grad(&params, &tiny(), &batch, 1.0, 0).unwrap();
        let (l2, g2) = loss_and_grad(&params, &tiny(), &batch, 2.0, 0).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for ((_, a), (_, b)) in g1.named().into_iter().zip(g2.named()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*y, 2.0 * x);
            }
        }
    }

    #[test]
    fn reconstruct_with_nothing_masked_is_identity() {
        let (layout, clip) = setup();
        let params: MaeParams<f32> = MaeParams::init(&tiny(), &ModelShape::of(&layout), 1).unwrap();
        let plan = make_mask(&layout, 0.0, 0).unwrap();
        let out = reconstruct(&params, &tiny(), &layout, &clip, &plan).unwrap();
        assert_eq!(out.frames, clip.frames);
        let plan = make_mask(&layout, 0.5, 0).unwrap();
        let out = reconstruct(&params, &tiny(), &layout, &clip, &plan).unwrap();
        for (x, &ok) in out.frames.iter().zip(clip.mask.as_slice().iter().cycle()) {
            assert!(ok || *x == 0.0);
        }
    }

    #[test]
    fn mismatched_plan_rejected() {
        let (layout, clip) = setup();
        let params: MaeParams<f32> = MaeParams::init(&tiny(), &ModelShape::of(&layout), 1).unwrap();
        let tokens = patchify(&clip, &layout).unwrap();
        let mut plan = make_mask(&layout, 0.5, 0).unwrap();
        plan.masked.pop();
        assert!(matches!(forward(&params, &tiny(), &tokens, &plan), Err(Error::Dimension(_))));
    }
}
