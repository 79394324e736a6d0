mod common;

use std::path::PathBuf;

use flatmae::data::{Loader, LoaderConfig, Shard};
use flatmae::flatgeo::{build_grid, ResampleGrid};
use flatmae::prep::{preprocess_run, resample_time, znorm_vertices, FlatClip, SurfaceRun};
use flatmae::{rng, Error};
use rand::Rng;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

fn random_run(n_vertices: usize, n_times: usize, tr: f64, seed: u64) -> SurfaceRun {
    let mut r = rng::seeded(seed);
    let values = (0..n_vertices * n_times).map(|i| r.random_range(-3.0..3.0) + (i / n_times) as f64).collect();
    SurfaceRun::new(values, n_vertices, tr, "sub", "run").unwrap()
}

#[test]
fn vertex_znorm_matches_direct_computation() {
    let run = random_run(100, 50, 0.72, 1);
    let out = znorm_vertices(&run);
    for v in 0..100 {
        let (m, s) = mean_std(run.row(v));
        for t in 0..50 {
            assert!((out.row(v)[t] - (run.row(v)[t] - m) / s).abs() < 1e-12);
        }
    }
}

#[test]
fn full_chain_matches_direct_computation() {
    let mesh = common::random_mesh(120, 10.0, 0.1, 3);
    let grid = build_grid(&mesh, 16, 16, 0.7).unwrap();
    let run = random_run(mesh.n_vertices(), 40, 0.72, 2);
    let frames = preprocess_run(&run, &grid, 1.0).unwrap();

    // 39 * 0.72 = 28.08 s, so samples at 0..=28
    assert_eq!(frames.len(), 29);
    let z: Vec<Vec<f64>> = (0..run.n_vertices)
        .map(|v| {
            let (m, s) = mean_std(run.row(v));
            run.row(v).iter().map(|x| (x - m) / s).collect()
        })
        .collect();
    for (j, frame) in frames.iter().enumerate() {
        let t = j as f64 / 0.72;
        let i = t.floor() as usize;
        let f = t - i as f64;
        let col: Vec<f64> =
            z.iter().map(|row| if i + 1 < row.len() { row[i] * (1.0 - f) + row[i + 1] * f } else { row[i] }).collect();
        let raw = grid.resample(&col).unwrap();
        let valid: Vec<f64> = raw.valid_values().collect();
        let (m, s) = mean_std(&valid);
        for (k, &ok) in grid.mask().as_slice().iter().enumerate() {
            let want = if ok { (raw.pixels[k] - m) / s } else { 0.0 };
            assert!((frame.pixels[k] - want).abs() < 1e-9, "frame {j} pixel {k}");
        }
    }
}

#[test]
fn resampling_to_the_same_tr_is_identity() {
    let run = random_run(5, 30, 1.0, 4);
    assert_eq!(resample_time(&run, 1.0).unwrap(), run);
}

struct Fixture {
    _dir: tempfile::TempDir,
    grid: ResampleGrid,
    paths: Vec<PathBuf>,
}

/// Shards whose valid pixels hold `1000 * run + frame`, so a clip's origin
/// can be read back from its values.
fn fixture(lengths: &[usize]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mesh = common::random_mesh(150, 10.0, 0.0, 9);
    let grid = build_grid(&mesh, 8, 8, 1.3).unwrap();
    let mask = grid.mask().clone();
    let mut paths = Vec::new();
    for (run, &n) in lengths.iter().enumerate() {
        let frames = (0..n * mask.len())
            .map(|i| if mask.as_slice()[i % mask.len()] { (1000 * run + i / mask.len()) as f32 } else { 0.0 })
            .collect();
        let clip = FlatClip::new(frames, mask.clone(), 0.0).unwrap();
        let path = dir.path().join(format!("run{run:02}.fmshrd"));
        Shard::from_clip(&clip, 1.0, "sub", &format!("run{run}"), grid.hash()).save(&path).unwrap();
        paths.push(path);
    }
    Fixture { _dir: dir, grid, paths }
}

fn origin(clip: &FlatClip) -> (usize, usize) {
    let k = clip.mask.as_slice().iter().position(|&v| v).unwrap();
    let first = clip.frames[k] as usize;
    let hw = clip.mask.len();
    for t in 0..clip.n_frames {
        for (i, &ok) in clip.mask.as_slice().iter().enumerate() {
            if ok {
                assert_eq!(clip.frames[t * hw + i] as usize, first + t, "clip crosses a run boundary");
            }
        }
    }
    (first / 1000, first % 1000)
}

fn config(seed: u64) -> LoaderConfig {
    LoaderConfig { batch_size: 4, capacity: 16, workers: 1, clip_len: 4, seed }
}

#[test]
fn single_worker_loader_is_deterministic() {
    let fx = fixture(&[20, 25, 30, 12]);
    let take = |seed| -> Vec<Vec<FlatClip>> {
        let mut l = Loader::new(fx.paths.clone(), fx.grid.clone(), config(seed)).unwrap();
        (0..3).map(|_| l.next_batch().unwrap()).collect()
    };
    let a = take(5);
    assert_eq!(a, take(5));
    assert_ne!(a, take(6));
    for clip in a.iter().flatten() {
        assert_eq!(clip.n_frames, 4);
        let (run, start) = origin(clip);
        assert_eq!(clip.start_second, start as f64);
        assert!(start + 4 <= [20, 25, 30, 12][run]);
    }
}

#[test]
fn capacity_equal_to_batch_size_works() {
    let fx = fixture(&[10, 10]);
    let cfg = LoaderConfig { capacity: 4, ..config(1) };
    let mut l = Loader::new(fx.paths.clone(), fx.grid.clone(), cfg).unwrap();
    for _ in 0..20 {
        assert_eq!(l.next_batch().unwrap().len(), 4);
    }
}

#[test]
fn bad_shards_are_skipped_and_all_bad_is_fatal() {
    let fx = fixture(&[20, 20]);
    let garbage = fx.paths[0].with_file_name("bad.fmshrd");
    std::fs::write(&garbage, b"not a shard").unwrap();
    let short = fx.paths[0].with_file_name("short.fmshrd");
    let mask = fx.grid.mask().clone();
    let clip = FlatClip::new(vec![0.0; 2 * mask.len()], mask, 0.0).unwrap();
    Shard::from_clip(&clip, 1.0, "s", "r", fx.grid.hash()).save(&short).unwrap();

    let paths = vec![garbage.clone(), fx.paths[0].clone(), short.clone(), fx.paths[1].clone()];
    let mut l = Loader::new(paths, fx.grid.clone(), config(2)).unwrap();
    for _ in 0..10 {
        for clip in l.next_batch().unwrap() {
            origin(&clip);
        }
    }
    assert_eq!(l.stats().shards_failed, 2);

    let mut dead = Loader::new(vec![garbage, short], fx.grid.clone(), config(2)).unwrap();
    assert!(matches!(dead.next_batch(), Err(Error::InsufficientData(_))));
}

#[test]
fn shards_from_another_grid_are_rejected() {
    let fx = fixture(&[20]);
    let other = build_grid(&common::random_mesh(150, 10.0, 0.0, 10), 8, 8, 1.3).unwrap();
    let shard = Shard::load(&fx.paths[0]).unwrap();
    assert!(shard.to_clip(&other).is_err());
    let mut l = Loader::new(fx.paths.clone(), other, config(0)).unwrap();
    assert!(l.next_batch().is_err());
}

#[test]
fn multi_worker_loader_covers_every_run() {
    let lengths = [20, 25, 30, 12, 16, 40];
    let fx = fixture(&lengths);
    let cfg = LoaderConfig { workers: 3, ..config(3) };
    let mut l = Loader::new(fx.paths.clone(), fx.grid.clone(), cfg).unwrap();
    let mut seen = [false; 6];
    for _ in 0..60 {
        for clip in l.next_batch().unwrap() {
            let (run, start) = origin(&clip);
            assert!(start + 4 <= lengths[run]);
            seen[run] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "{seen:?}");
    drop(l);
}

#[test]
fn shard_round_trip_is_bit_exact() {
    let fx = fixture(&[7]);
    let bytes = std::fs::read(&fx.paths[0]).unwrap();
    let shard = Shard::from_bytes(&bytes).unwrap();
    assert_eq!(shard.to_bytes(), bytes);
    assert!(Shard::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
