use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flatgeo::ValidMask;
use crate::prep::FlatClip;
use crate::rng;

/// Parcel label per pixel: `0` is background, parcels are `1..=n_parcels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParcelMap {
    labels: Vec<u32>,
    n_parcels: usize,
    mask: Arc<ValidMask>,
}

impl ParcelMap {
    pub fn new(mask: Arc<ValidMask>, labels: Vec<u32>, n_parcels: usize) -> Result<Self> {
        if labels.len() != mask.len() {
            return Err(Error::Dimension(format!("{} labels for {} pixels", labels.len(), mask.len())));
        }
        let mut seen = vec![false; n_parcels + 1];
        for (i, (&l, &ok)) in labels.iter().zip(mask.as_slice()).enumerate() {
            if l as usize > n_parcels {
                return Err(Error::Validation(format!("pixel {i} has label {l} > {n_parcels}")));
            }
            if l != 0 && !ok {
                return Err(Error::Validation(format!("background pixel {i} labelled {l}")));
            }
            seen[l as usize] = true;
        }
        if let Some(p) = (1..=n_parcels).find(|&p| !seen[p]) {
            return Err(Error::Validation(format!("parcel {p} has no pixels")));
        }
        Ok(Self { labels, n_parcels, mask })
    }

    /// Nearest-seed partition of the valid pixels around `n_parcels` random
    /// seed pixels. Ties go to the lower parcel id.
    pub fn voronoi(mask: Arc<ValidMask>, n_parcels: usize, seed: u64) -> Result<Self> {
        let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask.as_slice()[i]).collect();
        if n_parcels == 0 || n_parcels > valid.len() {
            return Err(Error::Config(format!("{n_parcels} parcels for {} valid pixels", valid.len())));
        }
        let w = mask.width();
        let seeds: Vec<usize> =
            rand::seq::index::sample(&mut rng::seeded(seed), valid.len(), n_parcels).iter().map(|k| valid[k]).collect();
        let mut labels = vec![0u32; mask.len()];
        for &i in &valid {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            let best = seeds
                .iter()
                .enumerate()
                .min_by_key(|(_, &s)| {
                    let (sr, sc) = ((s / w) as i64, (s % w) as i64);
                    (r - sr).pow(2) + (c - sc).pow(2)
                })
                .unwrap()
                .0;
            labels[i] = best as u32 + 1;
        }
        Self::new(mask, labels, n_parcels)
    }

    pub fn n_parcels(&self) -> usize {
        self.n_parcels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn mask(&self) -> &Arc<ValidMask> {
        &self.mask
    }
}

pub fn connectome_len(n_parcels: usize) -> usize {
    n_parcels * n_parcels.saturating_sub(1) / 2
}

/// Parcel-mean time series, `[parcel][t]`.
pub fn parcel_means(clip: &FlatClip, parcels: &ParcelMap) -> Result<Vec<Vec<f64>>> {
    if clip.mask.len() != parcels.labels.len() {
        return Err(Error::Dimension(format!(
            "clip has {} pixels per frame, parcel map {}",
            clip.mask.len(),
            parcels.labels.len()
        )));
    }
    let p = parcels.n_parcels;
    let mut counts = vec![0usize; p];
    for &l in &parcels.labels {
        if l > 0 {
            counts[l as usize - 1] += 1;
        }
    }
    let mut out = vec![vec![0.0; clip.n_frames]; p];
    for t in 0..clip.n_frames {
        for (&x, &l) in clip.frame(t).iter().zip(&parcels.labels) {
            if l > 0 {
                out[l as usize - 1][t] += x as f64;
            }
        }
        for (series, &n) in out.iter_mut().zip(&counts) {
            series[t] /= n as f64;
        }
    }
    Ok(out)
}

/// Strict upper triangle of the parcel-by-parcel Pearson correlation
/// matrix, row-major. Constant parcels correlate as 0.
pub fn connectome_features(clip: &FlatClip, parcels: &ParcelMap) -> Result<Vec<f64>> {
    if clip.n_frames < 2 || parcels.n_parcels < 2 {
        return Err(Error::Validation(format!(
            "connectome needs >= 2 frames and >= 2 parcels, got {} and {}",
            clip.n_frames, parcels.n_parcels
        )));
    }
    let series = parcel_means(clip, parcels)?;
    let centred: Vec<(Vec<f64>, f64)> = series
        .into_iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let c: Vec<f64> = s.iter().map(|x| x - mean).collect();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let degenerate = norm <= 1e-12 * mean.abs().max(1.0) * (s.len() as f64).sqrt();
            (c, if degenerate { 0.0 } else { norm })
        })
        .collect();
    let p = centred.len();
    let mut out = Vec::with_capacity(connectome_len(p));
    for i in 0..p {
        for j in i + 1..p {
            let ((a, na), (b, nb)) = (&centred[i], &centred[j]);
            out.push(if *na == 0.0 || *nb == 0.0 {
                0.0
            } else {
                (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
            });
        }
    }
    Ok(out)
}
