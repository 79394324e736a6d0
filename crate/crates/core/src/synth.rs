//! Synthetic surface fMRI.
//!
//! A flat annulus mesh (a disc with a hole standing in for the medial-wall
//! cut) carries `K` smooth Gaussian spatial components. Each run mixes them
//! with class-dependent amplitudes and random slow time courses, then adds
//! white noise scaled so that signal variance / noise variance = snr^2.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatgeo::FlatMesh;
use crate::prep::SurfaceRun;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Total vertex count, including invalid ones.
    pub n_vertices: usize,
    /// Vertices lifted off the plane (z = 1) and therefore invalid.
    pub n_invalid: usize,
    pub radius_mm: f64,
    /// Hole radius as a fraction of `radius_mm`.
    pub hole_fraction: f64,
    pub components: usize,
    pub snr: f64,
    /// `classes x components` amplitude table.
    pub class_profiles: Vec<Vec<f64>>,
    pub n_times: usize,
    pub tr: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_vertices: 2000,
            n_invalid: 0,
            radius_mm: 40.0,
            hole_fraction: 0.25,
            components: 4,
            snr: 1.0,
            class_profiles: orthogonal_profiles(2, 4),
            n_times: 120,
            tr: 0.72,
            seed: 0,
        }
    }
}

/// Class `c` drives exactly the components `k` with `k % classes == c`.
pub fn orthogonal_profiles(classes: usize, components: usize) -> Vec<Vec<f64>> {
    (0..classes).map(|c| (0..components).map(|k| if k % classes == c { 1.0 } else { 0.0 }).collect()).collect()
}

impl SynthSpec {
    pub fn classes(&self) -> usize {
        self.class_profiles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vertices < 3 || self.n_invalid + 3 > self.n_vertices {
            return Err(Error::Config(format!(
                "need at least 3 valid vertices ({} total, {} invalid)",
                self.n_vertices, self.n_invalid
            )));
        }
        if self.components == 0 {
            return Err(Error::Config("components must be >= 1".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if self.class_profiles.is_empty() {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.class_profiles.iter().any(|p| p.len() != self.components) {
            return Err(Error::Config("every class profile needs one amplitude per component".into()));
        }
        if !(self.radius_mm > 0.0) || !(0.0..0.9).contains(&self.hole_fraction) {
            return Err(Error::Config("radius must be positive and hole_fraction in [0, 0.9)".into()));
        }
        if self.n_times < 2 || !(self.tr > 0.0) {
            return Err(Error::Config("runs need n_times >= 2 and tr > 0".into()));
        }
        Ok(())
    }
}

/// Planar triangulated annulus with exactly `n_vertices` vertices.
pub fn make_mesh(spec: &SynthSpec) -> Result<FlatMesh> {
    spec.validate()?;
    let n = spec.n_vertices;
    let mut rng = rng::stream(spec.seed, 0);
    let r_out = spec.radius_mm;
    let r_in = spec.hole_fraction * r_out;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let rot = rng.random_range(0.0..std::f64::consts::TAU);
    let spacing = (std::f64::consts::PI * (r_out * r_out - r_in * r_in) / n as f64).sqrt();

    // sunflower spiral over the annulus with a small jitter
    let mut pts: Vec<[f32; 3]> = (0..n)
        .map(|i| {
            let f = (i as f64 + 0.5) / n as f64;
            let r = (r_in * r_in + (r_out * r_out - r_in * r_in) * f).sqrt();
            let th = rot + i as f64 * golden;
            let jx = rng.random_range(-0.15..0.15) * spacing;
            let jy = rng.random_range(-0.15..0.15) * spacing;
            [(r * th.cos() + jx) as f32, (r * th.sin() + jy) as f32, 0.0]
        })
        .collect();

    let dpts: Vec<delaunator::Point> =
        pts.iter().map(|p| delaunator::Point { x: p[0] as f64, y: p[1] as f64 }).collect();
    let tri = delaunator::triangulate(&dpts);
    let in_hole = |x: f64, y: f64| (x * x + y * y).sqrt() < r_in;
    let mut triangles = Vec::with_capacity(tri.triangles.len() / 3);
    for t in tri.triangles.chunks_exact(3) {
        let p = [t[0], t[1], t[2]].map(|i| [dpts[i].x, dpts[i].y]);
        let centroid = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
        let crosses_hole = in_hole(centroid[0], centroid[1])
            || (0..3).any(|e| {
                let (a, b) = (p[e], p[(e + 1) % 3]);
                in_hole(0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]))
            });
        let area2 = ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])).abs();
        if !crosses_hole && area2 > 1e-6 * spacing * spacing {
            triangles.push([t[0] as u32, t[1] as u32, t[2] as u32]);
        }
    }

    for v in index::sample(&mut rng, n, spec.n_invalid) {
        pts[v][2] = 1.0;
    }
    FlatMesh::from_z_rule(pts, triangles)
}

/// Ground truth behind a synthetic run.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub class_id: usize,
    /// Noise-free values, `n_vertices x n_times`.
    pub clean: Vec<f64>,
    /// `components x n_times`, each row zero-mean unit-variance.
    pub temporal: Vec<Vec<f64>>,
    pub amplitudes: Vec<f64>,
    pub noise_std: f64,
}

/// Mesh plus spatial components shared by every run of a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    pub mesh: FlatMesh,
    /// `components x n_vertices` Gaussian bumps.
    pub spatial: Vec<Vec<f64>>,
}

impl SynthWorld {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        let mesh = make_mesh(&spec)?;
        let mut rng = rng::stream(spec.seed, 1);
        let valid: Vec<usize> = (0..mesh.n_vertices()).filter(|&v| mesh.valid_vertex()[v]).collect();
        let spatial = (0..spec.components)
            .map(|_| {
                let c = mesh.xy(valid[rng.random_range(0..valid.len())]);
                let sigma = spec.radius_mm * rng.random_range(0.15..0.3);
                (0..mesh.n_vertices())
                    .map(|v| {
                        let p = mesh.xy(v);
                        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                        (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { spec, mesh, spatial })
    }

    /// Generates run `run_index` of class `class_id`. Runs are independent
    /// streams of the world seed.
    pub fn make_run(&self, class_id: usize, run_index: u64) -> Result<(SurfaceRun, Latent)> {
        let spec = &self.spec;
        if class_id >= spec.classes() {
            return Err(Error::Range(format!("class {class_id} of {}", spec.classes())));
        }
        let mut rng = rng::stream(spec.seed, 2 + run_index);
        let (nv, nt) = (self.mesh.n_vertices(), spec.n_times);
        let temporal: Vec<Vec<f64>> = (0..spec.components).map(|_| slow_course(&mut rng, nt, spec.tr)).collect();
        let amplitudes = spec.class_profiles[class_id].clone();

        let mut clean = vec![0.0; nv * nt];
        for k in 0..spec.components {
            let a = amplitudes[k];
            if a == 0.0 {
                continue;
            }
            for v in 0..nv {
                let s = a * self.spatial[k][v];
                for (x, &tc) in clean[v * nt..(v + 1) * nt].iter_mut().zip(&temporal[k]) {
                    *x += s * tc;
                }
            }
        }
        let rms = (clean.iter().map(|x| x * x).sum::<f64>() / clean.len() as f64).sqrt();
        let noise_std = if spec.snr.is_finite() { rms / spec.snr } else { 0.0 };
        let values: Vec<f64> = if noise_std > 0.0 {
            clean
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + noise_std * z
                })
                .collect()
        } else {
            clean.clone()
        };
        let run = SurfaceRun::new(
            values,
            nv,
            spec.tr,
            format!("sub-{:03}", run_index),
            format!("run-{:04}-c{class_id}", run_index),
        )?;
        Ok((run, Latent { class_id, clean, temporal, amplitudes, noise_std }))
    }
}

/// Sum of three slow sinusoids, standardized.
fn slow_course(rng: &mut rng::Rng, nt: usize, tr: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (rng.random_range(0.01..0.12), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    let raw: Vec<f64> = (0..nt)
        .map(|i| {
            let t = i as f64 * tr;
            waves.iter().map(|&(f, ph, a)| a * (std::f64::consts::TAU * f * t + ph).sin()).sum()
        })
        .collect();
    let st = crate::prep::Affine::standardize(raw.iter().copied());
    raw.iter().map(|&x| st.apply(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { n_vertices: 300, n_invalid: 10, n_times: 40, seed: 5, ..Default::default() }
    }

    #[test]
    fn mesh_is_deterministic_and_sized() {
        let a = make_mesh(&small()).unwrap();
        let b = make_mesh(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_vertices(), 300);
        assert_eq!(a.n_valid(), 290);
        for (p, &ok) in a.vertex_xyz().iter().zip(a.valid_vertex()) {
            assert_eq!(ok, p[2] == 0.0);
        }
        assert!(a.valid_triangles().count() > 300);
        let other = make_mesh(&SynthSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn mesh_has_a_hole() {
        let spec = small();
        let mesh = make_mesh(&spec).unwrap();
        let r_in = spec.hole_fraction * spec.radius_mm;
        for t in mesh.triangles() {
            let c = t.iter().fold([0.0, 0.0], |acc, &v| {
                let p = mesh.xy(v as usize);
                [acc[0] + p[0] / 3.0, acc[1] + p[1] / 3.0]
            });
            assert!((c[0] * c[0] + c[1] * c[1]).sqrt() >= r_in);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let w = SynthWorld::new(small()).unwrap();
        let (a, la) = w.make_run(1, 3).unwrap();
        let (b, lb) = w.make_run(1, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = w.make_run(1, 4).unwrap();
        assert_ne!(a.values, c.values);
        assert!(w.make_run(2, 0).is_err());
    }

    #[test]
    fn infinite_snr_is_clean() {
        let w = SynthWorld::new(SynthSpec { snr: f64::INFINITY, ..small() }).unwrap();
        let (run, lat) = w.make_run(0, 0).unwrap();
        assert_eq!(run.values, lat.clean);
        assert_eq!(lat.noise_std, 0.0);
    }

    #[test]
    fn explained_variance_tracks_snr() {
        for &snr in &[0.5, 1.0, 2.0] {
            let w = SynthWorld::new(SynthSpec { snr, ..small() }).unwrap();
            let mut fracs = Vec::new();
            for r in 0..20 {
                let (run, lat) = w.make_run((r % 2) as usize, r).unwrap();
                let cc: f64 = lat.clean.iter().map(|x| x * x).sum();
                let rc: f64 = run.values.iter().zip(&lat.clean).map(|(a, b)| a * b).sum();
                let rr: f64 = run.values.iter().map(|x| x * x).sum();
                let beta = rc / cc;
                fracs.push(beta * beta * cc / rr);
            }
            let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
            let want = snr * snr / (1.0 + snr * snr);
            assert!((mean - want).abs() < 0.05 * want, "snr {snr}: {mean} vs {want}");
        }
    }
}
