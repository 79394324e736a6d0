//! PNG panels of masked input, prediction and target.

use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prep::FlatClip;
use crate::token::{MaskPlan, PatchLayout};

pub const BACKGROUND: Rgb<u8> = Rgb([0, 0, 0]);
pub const MASKED: Rgb<u8> = Rgb([128, 128, 128]);
pub const GUTTER: Rgb<u8> = Rgb([255, 255, 255]);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Frames shown, one per panel row.
    pub frames: [usize; 3],
    /// Values at `±vmax` hit the ends of the colormap.
    pub vmax: f64,
    /// Each flat-map pixel becomes a `zoom x zoom` block.
    pub zoom: u32,
    pub gutter: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        // 1 s frames: rows 4 s apart
        Self { frames: [0, 4, 8], vmax: 3.0, zoom: 4, gutter: 4 }
    }
}

/// Blue-white-red ramp on `[-vmax, vmax]`.
pub fn diverging(x: f64, vmax: f64) -> Rgb<u8> {
    let u = (x / vmax).clamp(-1.0, 1.0);
    let (lo, hi) = ([33.0, 102.0, 172.0], [178.0, 24.0, 43.0]);
    let end = if u < 0.0 { lo } else { hi };
    let a = u.abs();
    let mix = |i: usize| (255.0 * (1.0 - a) + end[i] * a).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// Output size for an `h x w` flat map.
pub fn image_size(h: usize, w: usize, opts: &RenderOptions) -> (u32, u32) {
    let (pw, ph) = (w as u32 * opts.zoom, h as u32 * opts.zoom);
    (3 * pw + 4 * opts.gutter, 3 * ph + 4 * opts.gutter)
}

/// 3x3 grid: rows are `opts.frames`, columns are masked input, prediction
/// and target. Masked patches show as neutral gray in the first column.
pub fn render_triptych(
    layout: &PatchLayout,
    plan: &MaskPlan,
    prediction: &FlatClip,
    target: &FlatClip,
    opts: &RenderOptions,
) -> Result<RgbImage> {
    if opts.zoom == 0 || !(opts.vmax > 0.0) {
        return Err(Error::Config("zoom and vmax must be positive".into()));
    }
    for c in [prediction, target] {
        if *c.mask != *layout.mask || c.n_frames != layout.n_frames {
            return Err(Error::Dimension("clip does not match the layout".into()));
        }
    }
    if let Some(&f) = opts.frames.iter().find(|&&f| f >= layout.n_frames) {
        return Err(Error::Range(format!("frame {f} outside a {}-frame clip", layout.n_frames)));
    }
    let (h, w) = (layout.mask.height(), layout.mask.width());
    let mut hidden = vec![false; h * w];
    for &(_, s) in &plan.masked {
        let (gr, gc) = layout.nonempty_spatial[s];
        for r in gr * layout.p..(gr + 1) * layout.p {
            for c in gc * layout.p..(gc + 1) * layout.p {
                hidden[r * w + c] = true;
            }
        }
    }
    let (iw, ih) = image_size(h, w, opts);
    let mut img = RgbImage::from_pixel(iw, ih, GUTTER);
    let z = opts.zoom;
    for (row, &f) in opts.frames.iter().enumerate() {
        for col in 0..3 {
            let x0 = opts.gutter + col as u32 * (w as u32 * z + opts.gutter);
            let y0 = opts.gutter + row as u32 * (h as u32 * z + opts.gutter);
            for i in 0..h * w {
                let px = if !layout.mask.as_slice()[i] {
                    BACKGROUND
                } else {
                    match col {
                        0 if hidden[i] => MASKED,
                        1 => diverging(prediction.frame(f)[i] as f64, opts.vmax),
                        _ => diverging(target.frame(f)[i] as f64, opts.vmax),
                    }
                };
                let (r, c) = ((i / w) as u32, (i % w) as u32);
                for dy in 0..z {
                    for dx in 0..z {
                        img.put_pixel(x0 + c * z + dx, y0 + r * z + dy, px);
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Format(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}
