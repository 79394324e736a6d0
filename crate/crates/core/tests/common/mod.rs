#![allow(dead_code)]

use std::sync::Arc;

use flatmae::flatgeo::{FlatMesh, ValidMask};
use flatmae::mae::MaeConfig;
use flatmae::prep::FlatClip;
use flatmae::rng;
use rand::Rng;

/// Delaunay mesh over `n` uniform points in a `size x size` square with
/// roughly `invalid_frac` of the vertices lifted off the plane.
pub fn random_mesh(n: usize, size: f64, invalid_frac: f64, seed: u64) -> FlatMesh {
    let mut r = rng::seeded(seed);
    let mut pts: Vec<[f32; 3]> =
        (0..n).map(|_| [r.random_range(0.0..size) as f32, r.random_range(0.0..size) as f32, 0.0]).collect();
    let dp: Vec<delaunator::Point> = pts.iter().map(|p| delaunator::Point { x: p[0] as f64, y: p[1] as f64 }).collect();
    let tri = delaunator::triangulate(&dp);
    let tris: Vec<[u32; 3]> = tri
        .triangles
        .chunks_exact(3)
        .filter(|t| {
            let (a, b, c) = (&dp[t[0]], &dp[t[1]], &dp[t[2]]);
            ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs() > 1e-6 * size * size
        })
        .map(|t| [t[0] as u32, t[1] as u32, t[2] as u32])
        .collect();
    for p in pts.iter_mut() {
        if r.random_bool(invalid_frac) {
            p[2] = 1.0;
        }
    }
    FlatMesh::from_z_rule(pts, tris).unwrap()
}

pub fn tiny_config() -> MaeConfig {
    MaeConfig {
        enc_dim: 8,
        enc_depth: 2,
        enc_heads: 2,
        dec_dim: 8,
        dec_depth: 2,
        dec_heads: 2,
        p_t: 2,
        p: 2,
        mlp_ratio: 1.0,
        norm_pix_loss: false,
    }
}

/// An irregular valid region: a disc with a notch.
pub fn blob_mask(h: usize, w: usize) -> Arc<ValidMask> {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let rad = 0.45 * h.min(w) as f64;
    Arc::new(ValidMask::from_fn(h, w, |r, c| {
        let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        y * y + x * x < rad * rad && !(x > 0.0 && y.abs() < 1.0)
    }))
}

/// Clip with uniform values on valid pixels and zeros elsewhere.
pub fn random_clip(mask: &Arc<ValidMask>, n_frames: usize, seed: u64) -> FlatClip {
    let mut r = rng::seeded(seed);
    let n = mask.len();
    let frames =
        (0..n_frames * n).map(|i| if mask.as_slice()[i % n] { r.random_range(-1.0..1.0) } else { 0.0 }).collect();
    FlatClip::new(frames, Arc::clone(mask), 0.0).unwrap()
}

/// Initialized parameters with every tensor shifted by small noise so that
/// biases, norms and the mask token are nonzero.
pub fn perturbed_params(cfg: &MaeConfig, shape: &flatmae::mae::ModelShape, seed: u64) -> flatmae::mae::MaeParams<f64> {
    use flatmae::nn::ParamVisit;
    let mut p = flatmae::mae::MaeParams::<f64>::init(cfg, shape, seed).unwrap();
    let mut r = rng::stream(seed, 1);
    for (_, m) in p.named_mut() {
        for x in m.data.iter_mut() {
            *x += r.random_range(-0.3..0.3);
        }
    }
    p
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every parameter. Relative error is measured against
/// `max(|a|, |n|, 1e-6)`.
pub fn worst_grad_error<P: flatmae::nn::ParamVisit<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) -> (f64, String) {
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (ti, (name, g)) in analytic.named().iter().enumerate() {
        for i in 0..g.len() {
            let mut p = params.clone();
            p.named_mut()[ti].1.data[i] += h;
            let up = loss(&p);
            p.named_mut()[ti].1.data[i] -= 2.0 * h;
            let down = loss(&p);
            let num = (up - down) / (2.0 * h);
            let a = g.data[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a} numeric {num}"));
            }
        }
    }
    worst
}

/// Trains a small MAE on noisy synthetic runs and compares, on masked valid
/// pixels of held-out clips, the error of the reconstruction and of the
/// noisy input against the noise-free signal. Returns `(recon, noisy)` MSEs.
pub fn denoising_experiment(steps: u64) -> (f64, f64) {
    use flatmae::flatgeo::build_grid;
    use flatmae::flatgeo::FlatFrame;
    use flatmae::mae::{mask_for, reconstruct, TrainConfig, Trainer};
    use flatmae::prep::{apply_frame_affine, apply_vertex_affine, frame_stats, vertex_stats};
    use flatmae::synth::{SynthSpec, SynthWorld};
    use flatmae::token::build_layout;

    let spec = SynthSpec { n_vertices: 1500, n_times: 160, tr: 1.0, snr: 1.0, seed: 11, ..Default::default() };
    let world = SynthWorld::new(spec).unwrap();
    let grid = build_grid(&world.mesh, 16, 16, 2.05 * 40.0 / 16.0).unwrap();

    // noisy and clean videos, both normalized with the noisy run's statistics
    let video = |run_index: u64| -> (FlatClip, FlatClip) {
        let (run, latent) = world.make_run(run_index as usize % 2, run_index).unwrap();
        let stats = vertex_stats(&run);
        let noisy = apply_vertex_affine(&run, &stats);
        let clean = apply_vertex_affine(
            &flatmae::prep::SurfaceRun::new(latent.clean, run.n_vertices, run.tr, "s", "r").unwrap(),
            &stats,
        );
        let (mut nf, mut cf): (Vec<FlatFrame>, Vec<FlatFrame>) = (Vec::new(), Vec::new());
        for t in 0..run.n_times {
            let n = grid.resample(&noisy.column(t)).unwrap();
            let a = frame_stats(&n).unwrap();
            cf.push(apply_frame_affine(&grid.resample(&clean.column(t)).unwrap(), a));
            nf.push(apply_frame_affine(&n, a));
        }
        (FlatClip::from_frames(&nf, 0.0).unwrap(), FlatClip::from_frames(&cf, 0.0).unwrap())
    };
    let clip_len = 8;
    let cut = |v: &FlatClip, s: usize| flatmae::prep::extract_clips(v, clip_len, &[s]).unwrap().remove(0);

    let train: Vec<FlatClip> = (0..8).map(|i| video(i).0).collect();
    let model = MaeConfig {
        enc_dim: 32,
        enc_depth: 2,
        enc_heads: 4,
        dec_dim: 32,
        dec_depth: 1,
        dec_heads: 4,
        p_t: 2,
        p: 4,
        mlp_ratio: 2.0,
        norm_pix_loss: false,
    };
    let cfg = TrainConfig {
        model,
        batch_size: 16,
        base_lr: 2e-2,
        warmup_steps: steps / 10,
        total_steps: steps,
        mask_ratio: 0.5,
        clip_len,
        seed: 3,
        ..Default::default()
    };
    let layout = build_layout(grid.mask(), 2, 4, clip_len).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), layout.clone()).unwrap();
    let mut r = rng::stream(3, 99);
    for _ in 0..steps {
        let batch: Vec<FlatClip> = (0..cfg.batch_size)
            .map(|_| {
                let v = &train[r.random_range(0..train.len())];
                cut(v, r.random_range(0..=v.n_frames - clip_len))
            })
            .collect();
        trainer.train_step(&batch).unwrap();
    }

    let (mut recon_se, mut noisy_se, mut n) = (0.0, 0.0, 0usize);
    for run_index in 100..102u64 {
        let (noisy, clean) = video(run_index);
        for (k, start) in (0..noisy.n_frames - clip_len).step_by(clip_len).enumerate() {
            let (x, c) = (cut(&noisy, start), cut(&clean, start));
            let plan = mask_for(&cfg, &layout, 1_000_000 + run_index, k).unwrap();
            let rec = reconstruct(&trainer.params, &cfg.model, &layout, &x, &plan).unwrap();
            let hw = layout.mask.len();
            let w = layout.mask.width();
            for &(t, s) in &plan.masked {
                let (gr, gc) = layout.nonempty_spatial[s];
                for f in t * 2..t * 2 + 2 {
                    for y in gr * 4..gr * 4 + 4 {
                        for xx in gc * 4..gc * 4 + 4 {
                            if layout.mask.get(y, xx) {
                                let i = f * hw + y * w + xx;
                                recon_se += (rec.frames[i] as f64 - c.frames[i] as f64).powi(2);
                                noisy_se += (x.frames[i] as f64 - c.frames[i] as f64).powi(2);
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (recon_se / n as f64, noisy_se / n as f64)
}

/// Pixel value by direct search: first all-valid triangle in face order
/// whose barycentric coordinates at the pixel centre are all >= -1e-9.
pub fn brute_force_resample(mesh: &FlatMesh, h: usize, w: usize, s: f64, f: &[f64]) -> Vec<Option<f64>> {
    let xyz = mesh.vertex_xyz();
    let valid = mesh.valid_vertex();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (p, &ok) in xyz.iter().zip(valid) {
        if ok {
            x0 = x0.min(p[0] as f64);
            x1 = x1.max(p[0] as f64);
            y0 = y0.min(p[1] as f64);
            y1 = y1.max(p[1] as f64);
        }
    }
    let left = (x0 + x1) / 2.0 - w as f64 * s / 2.0;
    let top = (y0 + y1) / 2.0 + h as f64 * s / 2.0;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (px, py) = (left + (c as f64 + 0.5) * s, top - (r as f64 + 0.5) * s);
            let mut val = None;
            for t in mesh.triangles() {
                let v = t.map(|i| i as usize);
                if !v.iter().all(|&i| valid[i]) {
                    continue;
                }
                let [a, b, cc] = v.map(|i| (xyz[i][0] as f64, xyz[i][1] as f64));
                let det = (b.1 - cc.1) * (a.0 - cc.0) + (cc.0 - b.0) * (a.1 - cc.1);
                let l0 = ((b.1 - cc.1) * (px - cc.0) + (cc.0 - b.0) * (py - cc.1)) / det;
                let l1 = ((cc.1 - a.1) * (px - cc.0) + (a.0 - cc.0) * (py - cc.1)) / det;
                let l2 = 1.0 - l0 - l1;
                if l0 >= -1e-9 && l1 >= -1e-9 && l2 >= -1e-9 {
                    val = Some(l0 * f[v[0]] + l1 * f[v[1]] + l2 * f[v[2]]);
                    break;
                }
            }
            out.push(val);
        }
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}
