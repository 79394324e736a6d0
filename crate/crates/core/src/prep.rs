//! Preprocessing from surface time series to normalized flat-map clips.
//!
//! Order matters and is fixed: per-vertex z-scoring, temporal resampling to
//! the target TR, flat-map resampling, then per-frame spatial z-scoring over
//! valid pixels. All standard deviations are population (divide by N).

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flatgeo::{FlatFrame, ResampleGrid, ValidMask};

/// Default clip length in frames (seconds at TR = 1 s).
pub const CLIP_LEN: usize = 16;

/// A surface-mapped run: `n_vertices x n_times` values, vertex-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceRun {
    pub values: Vec<f64>,
    pub n_vertices: usize,
    pub n_times: usize,
    pub tr: f64,
    pub subject_id: String,
    pub run_id: String,
}

impl SurfaceRun {
    pub fn new(
        values: Vec<f64>,
        n_vertices: usize,
        tr: f64,
        subject_id: impl Into<String>,
        run_id: impl Into<String>,
    ) -> Result<Self> {
        if n_vertices == 0 || !values.len().is_multiple_of(n_vertices) {
            return Err(Error::Dimension(format!(
                "{} values do not split into {n_vertices} vertex rows",
                values.len()
            )));
        }
        let n_times = values.len() / n_vertices;
        if n_times < 2 {
            return Err(Error::Validation(format!("run needs at least 2 time points, got {n_times}")));
        }
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::Validation(format!("TR must be positive, got {tr}")));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at vertex {} time {}", i / n_times, i % n_times)));
        }
        Ok(Self { values, n_vertices, n_times, tr, subject_id: subject_id.into(), run_id: run_id.into() })
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.values[v * self.n_times..(v + 1) * self.n_times]
    }

    /// Values of all vertices at time index `t`.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.n_vertices).map(|v| self.values[v * self.n_times + t]).collect()
    }

    pub fn duration(&self) -> f64 {
        (self.n_times - 1) as f64 * self.tr
    }

    fn with_values(&self, values: Vec<f64>, n_times: usize, tr: f64) -> Self {
        Self {
            values,
            n_vertices: self.n_vertices,
            n_times,
            tr,
            subject_id: self.subject_id.clone(),
            run_id: self.run_id.clone(),
        }
    }
}

/// `y = (x - shift) * scale`. A zero scale marks a constant signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Affine {
    /// Population mean/std standardizer; constant inputs map to zero.
    pub fn standardize(xs: impl Iterator<Item = f64> + Clone) -> Self {
        let (n, sum) = xs.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
        if n == 0 {
            return Self { shift: 0.0, scale: 0.0 };
        }
        let mean = sum / n as f64;
        let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let scale = if std <= 1e-12 * mean.abs().max(1.0) { 0.0 } else { 1.0 / std };
        Self { shift: mean, scale }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) * self.scale
    }
}

pub fn vertex_stats(run: &SurfaceRun) -> Vec<Affine> {
    (0..run.n_vertices).map(|v| Affine::standardize(run.row(v).iter().copied())).collect()
}

pub fn apply_vertex_affine(run: &SurfaceRun, stats: &[Affine]) -> SurfaceRun {
    let values =
        run.values.chunks(run.n_times).zip(stats).flat_map(|(row, a)| row.iter().map(move |&x| a.apply(x))).collect();
    run.with_values(values, run.n_times, run.tr)
}

/// Z-scores every vertex time series; constant rows become zeros.
pub fn znorm_vertices(run: &SurfaceRun) -> SurfaceRun {
    apply_vertex_affine(run, &vertex_stats(run))
}

/// Number of samples on the grid `0, tr_out, 2 tr_out, ...` inside the run.
pub fn resampled_len(n_times: usize, tr_raw: f64, tr_out: f64) -> usize {
    let span = (n_times - 1) as f64 * tr_raw / tr_out;
    (span + 1e-9 * span.max(1.0)).floor() as usize + 1
}

/// Linear interpolation of every vertex onto a uniform grid with spacing
/// `tr_out` seconds. No extrapolation past the last sample.
pub fn resample_time(run: &SurfaceRun, tr_out: f64) -> Result<SurfaceRun> {
    if !(tr_out > 0.0 && tr_out.is_finite()) {
        return Err(Error::Config(format!("tr_out must be positive, got {tr_out}")));
    }
    if tr_out == run.tr {
        return Ok(run.clone());
    }
    let len = resampled_len(run.n_times, run.tr, tr_out);
    let ratio = tr_out / run.tr;
    let last = run.n_times - 1;
    let taps: Vec<(usize, f64)> = (0..len)
        .map(|j| {
            let mut u = j as f64 * ratio;
            if (u - u.round()).abs() < 1e-9 {
                u = u.round();
            }
            let i = (u.floor() as usize).min(last);
            (i, if i == last { 0.0 } else { u - i as f64 })
        })
        .collect();
    let mut values = Vec::with_capacity(run.n_vertices * len);
    for v in 0..run.n_vertices {
        let row = run.row(v);
        values.extend(taps.iter().map(|&(i, f)| if f == 0.0 { row[i] } else { row[i] + f * (row[i + 1] - row[i]) }));
    }
    Ok(run.with_values(values, len, tr_out))
}

pub fn frame_stats(frame: &FlatFrame) -> Result<Affine> {
    frame.validate()?;
    let n = frame.mask.count();
    if n < 2 {
        return Err(Error::Validation(format!("frame normalization needs 2 valid pixels, got {n}")));
    }
    Ok(Affine::standardize(frame.valid_values()))
}

pub fn apply_frame_affine(frame: &FlatFrame, a: Affine) -> FlatFrame {
    let pixels =
        frame.pixels.iter().zip(frame.mask.as_slice()).map(|(&x, &ok)| if ok { a.apply(x) } else { 0.0 }).collect();
    FlatFrame { pixels, mask: Arc::clone(&frame.mask) }
}

/// Z-scores a frame over its valid pixels. Rejects frames whose background
/// is not zero.
pub fn frame_norm(frame: &FlatFrame) -> Result<FlatFrame> {
    Ok(apply_frame_affine(frame, frame_stats(frame)?))
}

/// A `n_frames x H x W` single-channel flat-map video, f32, frame-major.
/// Full runs and fixed-length training clips share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatClip {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub mask: Arc<ValidMask>,
    /// Offset of the first frame within its run, in seconds.
    pub start_second: f64,
}

impl FlatClip {
    pub fn new(frames: Vec<f32>, mask: Arc<ValidMask>, start_second: f64) -> Result<Self> {
        let hw = mask.len();
        if hw == 0 || !frames.len().is_multiple_of(hw) {
            return Err(Error::Dimension(format!("{} values do not split into {hw}-pixel frames", frames.len())));
        }
        Ok(Self { n_frames: frames.len() / hw, frames, mask, start_second })
    }

    pub fn from_frames(frames: &[FlatFrame], start_second: f64) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Dimension("no frames".into()))?;
        let mask = Arc::clone(&first.mask);
        let mut data = Vec::with_capacity(frames.len() * mask.len());
        for f in frames {
            if *f.mask != *mask {
                return Err(Error::Dimension("frames built on different grids".into()));
            }
            data.extend(f.pixels.iter().map(|&x| x as f32));
        }
        Self::new(data, mask, start_second)
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let hw = self.mask.len();
        &self.frames[t * hw..(t + 1) * hw]
    }

    /// Frame `t` as an f64 image.
    pub fn flat_frame(&self, t: usize) -> FlatFrame {
        FlatFrame { pixels: self.frame(t).iter().map(|&x| x as f64).collect(), mask: Arc::clone(&self.mask) }
    }
}

/// Cuts contiguous windows of `clip_len` frames at the given starts. Frame
/// rate is one per second, so a start index is also its offset in seconds.
pub fn extract_clips(video: &FlatClip, clip_len: usize, starts: &[usize]) -> Result<Vec<FlatClip>> {
    if clip_len == 0 {
        return Err(Error::Config("clip_len must be positive".into()));
    }
    let hw = video.mask.len();
    starts
        .iter()
        .map(|&s| {
            if s + clip_len > video.n_frames {
                return Err(Error::Range(format!(
                    "clip [{s}, {}) exceeds the {} available frames",
                    s + clip_len,
                    video.n_frames
                )));
            }
            Ok(FlatClip {
                frames: video.frames[s * hw..(s + clip_len) * hw].to_vec(),
                n_frames: clip_len,
                mask: Arc::clone(&video.mask),
                start_second: video.start_second + s as f64,
            })
        })
        .collect()
}

/// Runs the full chain on one run and returns its normalized flat frames.
pub fn preprocess_run(run: &SurfaceRun, grid: &ResampleGrid, tr_out: f64) -> Result<Vec<FlatFrame>> {
    let resampled = resample_time(&znorm_vertices(run), tr_out)?;
    (0..resampled.n_times).into_par_iter().map(|t| frame_norm(&grid.resample(&resampled.column(t))?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(values: Vec<f64>, n_vertices: usize, tr: f64) -> SurfaceRun {
        SurfaceRun::new(values, n_vertices, tr, "s", "r").unwrap()
    }

    fn mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn znorm_small_rows() {
        let out = znorm_vertices(&run(vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0], 2, 1.0));
        let (m, s) = mean_std(out.row(0));
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert_eq!(out.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn znorm_random_run() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(11);
        let values: Vec<f64> = (0..100 * 50).map(|_| rng.random_range(-3.0..7.0)).collect();
        let out = znorm_vertices(&run(values, 100, 0.72));
        for v in 0..100 {
            let (m, s) = mean_std(out.row(v));
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_runs() {
        assert!(SurfaceRun::new(vec![1.0, f64::NAN, 2.0, 3.0], 2, 1.0, "s", "r").is_err());
        assert!(SurfaceRun::new(vec![1.0, 2.0], 2, 1.0, "s", "r").is_err());
        assert!(SurfaceRun::new(vec![1.0, 2.0], 1, 0.0, "s", "r").is_err());
    }

    #[test]
    fn resample_time_identity_and_length() {
        let r = run((0..12).map(|x| x as f64 * 0.3).collect(), 3, 1.0);
        assert_eq!(resample_time(&r, 1.0).unwrap(), r);
        let r = run(vec![0.0, 1.0, 2.0], 1, 2.0);
        let out = resample_time(&r, 1.0).unwrap();
        assert_eq!(out.n_times, 5);
        assert_eq!(out.values, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn resample_time_exact_on_lines() {
        // 0.72 s TR; value = 0.4 t - 1.5 for vertex 0, -2 t + 3 for vertex 1
        let tr = 0.72;
        let t_raw = 1200;
        let line = |v: usize, t: f64| if v == 0 { 0.4 * t - 1.5 } else { -2.0 * t + 3.0 };
        let values: Vec<f64> = (0..2).flat_map(|v| (0..t_raw).map(move |i| line(v, i as f64 * tr))).collect();
        let out = resample_time(&run(values, 2, tr), 1.0).unwrap();
        assert_eq!(out.n_times, ((t_raw - 1) as f64 * tr).floor() as usize + 1);
        for v in 0..2 {
            for (j, &x) in out.row(v).iter().enumerate() {
                assert!((x - line(v, j as f64)).abs() < 1e-9, "v{v} t{j}: {x}");
            }
        }
    }

    fn frame(values: &[f64], valid: &[bool]) -> FlatFrame {
        let mask = Arc::new(ValidMask::new(1, values.len(), valid.to_vec()).unwrap());
        FlatFrame { pixels: values.to_vec(), mask }
    }

    #[test]
    fn frame_norm_two_pixels() {
        let f = frame(&[2.0, 0.0, 4.0], &[true, false, true]);
        let out = frame_norm(&f).unwrap();
        assert_eq!(out.pixels, vec![-1.0, 0.0, 1.0]);
        let again = frame_norm(&out).unwrap();
        for (a, b) in again.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_norm_rejects_dirty_background() {
        let f = frame(&[2.0, 7.0, 4.0], &[true, false, true]);
        assert!(matches!(frame_norm(&f), Err(Error::Invariant(_))));
        let f = frame(&[2.0, 0.0, 0.0], &[true, false, false]);
        assert!(matches!(frame_norm(&f), Err(Error::Validation(_))));
    }

    #[test]
    fn frame_norm_constant_to_zero() {
        let f = frame(&[3.3, 0.0, 3.3, 3.3], &[true, false, true, true]);
        assert_eq!(frame_norm(&f).unwrap().pixels, vec![0.0; 4]);
    }

    #[test]
    fn clip_extraction() {
        let mask = Arc::new(ValidMask::full(2, 2));
        let video = FlatClip::new((0..32 * 4).map(|x| x as f32).collect(), mask.clone(), 0.0).unwrap();
        let clips = extract_clips(&video, 16, &[0, 16]).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].frames, video.frames[..64]);
        assert_eq!(clips[1].frames, video.frames[64..]);
        assert_eq!(clips[1].start_second, 16.0);

        let video = FlatClip::new((0..20 * 4).map(|x| x as f32).collect(), mask.clone(), 0.0).unwrap();
        let c = &extract_clips(&video, 15, &[5]).unwrap()[0];
        assert_eq!(c.frame(0), video.frame(5));
        assert_eq!(c.frame(14), video.frame(19));
        assert!(matches!(extract_clips(&video, 16, &[5]), Err(Error::Range(_))));

        let video = FlatClip::new(vec![1.0; 16 * 4], mask, 0.0).unwrap();
        assert_eq!(extract_clips(&video, 16, &[0]).unwrap()[0], video);
    }
}
