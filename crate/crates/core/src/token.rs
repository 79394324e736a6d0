//! Spacetime patchification and tube masking.
//!
//! A clip of `T x H x W` is cut into `p_t x p x p` patches. Spatial patch
//! positions that contain no valid pixel are dropped entirely; the rest are
//! kept even when partially empty. Tokens are ordered time-major: token
//! `t * S + s` is temporal slot `t` of the `s`-th non-empty spatial patch.

use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatgeo::ValidMask;
use crate::prep::FlatClip;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub p_t: usize,
    pub p: usize,
    pub n_frames: usize,
    pub grid_t: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Non-empty spatial patches `(row, col)`, row-major.
    pub nonempty_spatial: Vec<(usize, usize)>,
    /// Valid pixel count of each non-empty spatial patch.
    pub valid_pixel_count: Vec<usize>,
    pub mask: Arc<ValidMask>,
}

/// Enumerates the non-empty spatial patches of a valid-pixel mask.
pub fn build_layout(mask: &Arc<ValidMask>, p_t: usize, p: usize, n_frames: usize) -> Result<PatchLayout> {
    let (h, w) = (mask.height(), mask.width());
    if p == 0 || p_t == 0 {
        return Err(Error::Config("patch sizes must be positive".into()));
    }
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("grid {h}x{w} is not divisible by patch size {p}")));
    }
    if !n_frames.is_multiple_of(p_t) || n_frames == 0 {
        return Err(Error::Config(format!("{n_frames} frames are not divisible by temporal patch size {p_t}")));
    }
    let (grid_h, grid_w) = (h / p, w / p);
    let mut nonempty_spatial = Vec::new();
    let mut valid_pixel_count = Vec::new();
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let n = (0..p)
                .flat_map(|dy| (0..p).map(move |dx| (gr * p + dy, gc * p + dx)))
                .filter(|&(r, c)| mask.get(r, c))
                .count();
            if n > 0 {
                nonempty_spatial.push((gr, gc));
                valid_pixel_count.push(n);
            }
        }
    }
    Ok(PatchLayout {
        p_t,
        p,
        n_frames,
        grid_t: n_frames / p_t,
        grid_h,
        grid_w,
        nonempty_spatial,
        valid_pixel_count,
        mask: Arc::clone(mask),
    })
}

impl PatchLayout {
    pub fn n_spatial(&self) -> usize {
        self.nonempty_spatial.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_t * self.n_spatial()
    }

    pub fn patch_dim(&self) -> usize {
        self.p_t * self.p * self.p
    }

    pub fn token_index(&self, t: usize, s: usize) -> usize {
        t * self.n_spatial() + s
    }

    /// `(frame, row, col)` of every element of token `(t, s)`, in the
    /// element order used by [`PatchTensor`] (time, then row, then column).
    fn token_pixels(&self, t: usize, s: usize) -> impl Iterator<Item = (usize, usize, usize)> {
        let (gr, gc) = self.nonempty_spatial[s];
        let (p, pt) = (self.p, self.p_t);
        (0..pt).flat_map(move |dt| {
            (0..p).flat_map(move |dy| (0..p).map(move |dx| (t * pt + dt, gr * p + dy, gc * p + dx)))
        })
    }

    fn check_clip(&self, clip: &FlatClip) -> Result<()> {
        if clip.n_frames != self.n_frames || *clip.mask != *self.mask {
            return Err(Error::Dimension(format!(
                "clip {}x{}x{} does not match layout {}x{}x{} (or was built on another grid)",
                clip.n_frames,
                clip.height(),
                clip.width(),
                self.n_frames,
                self.mask.height(),
                self.mask.width()
            )));
        }
        Ok(())
    }
}

/// Tokens of one clip: `n_tokens x patch_dim` values and validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    pub tokens: Vec<f32>,
    pub pixel_valid: Vec<bool>,
    /// `(t_index, spatial_index)` per token.
    pub index: Vec<(usize, usize)>,
    pub patch_dim: usize,
}

impl PatchTensor {
    pub fn n_tokens(&self) -> usize {
        self.index.len()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    pub fn token_valid(&self, i: usize) -> &[bool] {
        &self.pixel_valid[i * self.patch_dim..(i + 1) * self.patch_dim]
    }
}

pub fn patchify(clip: &FlatClip, layout: &PatchLayout) -> Result<PatchTensor> {
    layout.check_clip(clip)?;
    let (h, w) = (clip.height(), clip.width());
    let n = layout.n_tokens();
    let d = layout.patch_dim();
    let mut tokens = Vec::with_capacity(n * d);
    let mut pixel_valid = Vec::with_capacity(n * d);
    let mut index = Vec::with_capacity(n);
    for t in 0..layout.grid_t {
        for s in 0..layout.n_spatial() {
            for (f, r, c) in layout.token_pixels(t, s) {
                let ok = layout.mask.get(r, c);
                pixel_valid.push(ok);
                tokens.push(if ok { clip.frames[(f * h + r) * w + c] } else { 0.0 });
            }
            index.push((t, s));
        }
    }
    Ok(PatchTensor { tokens, pixel_valid, index, patch_dim: d })
}

/// Inverse of [`patchify`] on valid pixels; everything else is zero.
pub fn unpatchify(tensor: &PatchTensor, layout: &PatchLayout) -> Result<FlatClip> {
    if tensor.patch_dim != layout.patch_dim() || tensor.n_tokens() != layout.n_tokens() {
        return Err(Error::Dimension(format!(
            "{} tokens of dim {} for a layout of {} tokens of dim {}",
            tensor.n_tokens(),
            tensor.patch_dim,
            layout.n_tokens(),
            layout.patch_dim()
        )));
    }
    let (h, w) = (layout.mask.height(), layout.mask.width());
    let mut frames = vec![0.0f32; layout.n_frames * h * w];
    for (i, &(t, s)) in tensor.index.iter().enumerate() {
        for (j, (f, r, c)) in layout.token_pixels(t, s).enumerate() {
            if layout.mask.get(r, c) {
                frames[(f * h + r) * w + c] = tensor.tokens[i * tensor.patch_dim + j];
            }
        }
    }
    FlatClip::new(frames, Arc::clone(&layout.mask), 0.0)
}

/// Split of a clip's tokens into encoder-visible and masked sets. Whole
/// spatial tubes are masked or kept together across every temporal slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// `(t_index, spatial_index)`, sorted.
    pub visible: Vec<(usize, usize)>,
    pub masked: Vec<(usize, usize)>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of visible spatial tubes for a masking ratio.
pub fn visible_tubes(ratio: f64, n_spatial: usize) -> usize {
    // slack absorbs representation error such as (1 - 0.9) * 10 = 0.99999...
    let x = (1.0 - ratio) * n_spatial as f64;
    ((x + 1e-9).floor() as usize).min(n_spatial)
}

/// Samples `floor((1 - ratio) * S)` visible tubes uniformly without
/// replacement.
pub fn make_mask(layout: &PatchLayout, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("masking ratio must be in [0, 1), got {ratio}")));
    }
    let mut plan = make_mask_with_count(layout, visible_tubes(ratio, layout.n_spatial()), seed)?;
    plan.ratio = ratio;
    Ok(plan)
}

/// Tube mask with an explicit number of visible spatial tubes.
pub fn make_mask_with_count(layout: &PatchLayout, n_visible: usize, seed: u64) -> Result<MaskPlan> {
    let s = layout.n_spatial();
    if n_visible > s {
        return Err(Error::Config(format!("{n_visible} visible tubes requested but only {s} exist")));
    }
    let mut keep = vec![false; s];
    let mut rng = rng::seeded(seed);
    for i in index::sample(&mut rng, s, n_visible) {
        keep[i] = true;
    }
    let mut visible = Vec::with_capacity(n_visible * layout.grid_t);
    let mut masked = Vec::with_capacity((s - n_visible) * layout.grid_t);
    for t in 0..layout.grid_t {
        for (si, &k) in keep.iter().enumerate() {
            if k {
                visible.push((t, si))
            } else {
                masked.push((t, si))
            }
        }
    }
    let ratio = if s == 0 { 0.0 } else { 1.0 - n_visible as f64 / s as f64 };
    Ok(MaskPlan { visible, masked, ratio, seed })
}

/// Every token visible; used for probing and reconstruction with no mask.
pub fn full_plan(layout: &PatchLayout) -> MaskPlan {
    let visible = (0..layout.grid_t).flat_map(|t| (0..layout.n_spatial()).map(move |s| (t, s))).collect();
    MaskPlan { visible, masked: Vec::new(), ratio: 0.0, seed: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout_for(mask: ValidMask, p_t: usize, p: usize, t: usize) -> PatchLayout {
        build_layout(&Arc::new(mask), p_t, p, t).unwrap()
    }

    #[test]
    fn full_grid_four_patches() {
        let l = layout_for(ValidMask::full(32, 32), 16, 16, 16);
        assert_eq!(l.n_spatial(), 4);
        assert_eq!(l.n_tokens(), 4);
    }

    #[test]
    fn single_valid_pixel_one_patch() {
        let l = layout_for(ValidMask::from_fn(32, 48, |r, c| r == 20 && c == 40), 16, 16, 16);
        assert_eq!(l.nonempty_spatial, vec![(1, 2)]);
        assert_eq!(l.valid_pixel_count, vec![1]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let m = Arc::new(ValidMask::full(30, 32));
        assert!(matches!(build_layout(&m, 16, 16, 16), Err(Error::Config(_))));
        let m = Arc::new(ValidMask::full(32, 32));
        assert!(matches!(build_layout(&m, 3, 16, 16), Err(Error::Config(_))));
    }

    #[test]
    fn empty_patches_absent() {
        // left half valid only
        let mask = ValidMask::from_fn(8, 16, |_, c| c < 8);
        let l = layout_for(mask.clone(), 2, 4, 4);
        assert_eq!(l.nonempty_spatial, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let clip = FlatClip::new(vec![1.0; 4 * 8 * 16], Arc::new(mask), 0.0).unwrap();
        let pt = patchify(&clip, &l).unwrap();
        assert_eq!(pt.n_tokens(), 8);
        assert!(pt.pixel_valid.iter().all(|&v| v));
    }

    #[test]
    fn mask_ratio_zero_and_tube_rounding() {
        let l = layout_for(ValidMask::full(8, 8), 1, 2, 2);
        let plan = make_mask(&l, 0.0, 3).unwrap();
        assert_eq!(plan.visible.len(), 32);
        assert!(plan.masked.is_empty());
        assert_eq!(visible_tubes(0.9, 364), 36);
        assert_eq!(visible_tubes(0.9, 10), 1);
        assert!(make_mask(&l, 1.0, 0).is_err());
        assert_eq!(make_mask(&l, 0.5, 9).unwrap(), make_mask(&l, 0.5, 9).unwrap());
        assert_eq!(make_mask_with_count(&l, 5, 1).unwrap().visible.len(), 10);
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(seed in 0u64..1000, pt in prop::sample::select(vec![1usize, 2, 4])) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let mask = ValidMask::from_fn(12, 16, |r, c| !(r * 7 + c * 3 + seed as usize).is_multiple_of(5) && r < 10);
            let mask = Arc::new(mask);
            let frames: Vec<f32> = (0..4 * 12 * 16)
                .map(|i| if mask.as_slice()[i % (12 * 16)] { rng.random_range(-3.0..3.0) } else { 0.0 })
                .collect();
            let clip = FlatClip::new(frames, mask.clone(), 0.0).unwrap();
            let l = build_layout(&mask, pt, 4, 4).unwrap();
            let tensor = patchify(&clip, &l).unwrap();
            let back = unpatchify(&tensor, &l).unwrap();
            prop_assert_eq!(back.frames.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            clip.frames.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            for (x, ok) in tensor.tokens.iter().zip(&tensor.pixel_valid) {
                prop_assert!(*ok || *x == 0.0);
            }
        }
    }
}
