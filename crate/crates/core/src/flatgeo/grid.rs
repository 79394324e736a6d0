use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::mesh::FlatMesh;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const FGRID_MAGIC: &[u8; 7] = b"FGRID1\0";

/// Barycentric coordinates at or above this value count as inside.
pub const INSIDE_TOL: f64 = -1e-9;

/// Which pixels of an `height x width` grid are covered by the flat map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl ValidMask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != height * width {
            return Err(Error::Dimension(format!("mask has {} entries for a {height}x{width} grid", valid.len())));
        }
        Ok(Self { height, width, valid })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, valid: vec![true; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let valid = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, valid }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// A regular pixel grid over the flat map plus sparse interpolation weights
/// (CSR over valid pixels in row-major order).
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleGrid {
    pixel_mm: f64,
    origin_xy: [f64; 2],
    n_vertices: usize,
    mask: Arc<ValidMask>,
    pixel_index: Vec<u32>,
    row_ptr: Vec<u32>,
    vertex: Vec<u32>,
    weight: Vec<f64>,
}

/// Barycentric coordinates of `p` with respect to triangle `t`.
pub fn barycentric(t: [[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = t;
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let l0 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l1 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    [l0, l1, 1.0 - l0 - l1]
}

/// Fits a `height x width` grid with spacing `pixel_mm` centred on the
/// bounding box of the valid vertices and precomputes linear interpolation
/// weights for every pixel centre that falls inside an all-valid triangle.
/// Overlapping triangles resolve to the first in face order.
pub fn build_grid(mesh: &FlatMesh, height: usize, width: usize, pixel_mm: f64) -> Result<ResampleGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("grid must be at least 1x1, got {height}x{width}")));
    }
    if !(pixel_mm > 0.0 && pixel_mm.is_finite()) {
        return Err(Error::Config(format!("pixel_mm must be positive, got {pixel_mm}")));
    }
    let tris: Vec<[u32; 3]> = mesh.valid_triangles().map(|(_, t)| t).collect();
    if tris.is_empty() {
        return Err(Error::EmptyMesh);
    }

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (v, &ok) in mesh.valid_vertex().iter().enumerate() {
        if ok {
            let p = mesh.xy(v);
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let cx = 0.5 * (lo[0] + hi[0]);
    let cy = 0.5 * (lo[1] + hi[1]);
    // top-left corner; rows grow downward (decreasing y)
    let origin_xy = [cx - 0.5 * width as f64 * pixel_mm, cy + 0.5 * height as f64 * pixel_mm];
    let geom = Geometry { pixel_mm, origin_xy };

    // bucket triangles by the rows they may cover, keeping face order
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (i, t) in tris.iter().enumerate() {
        let ys = t.map(|v| mesh.xy(v as usize)[1]);
        let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let ymax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if let Some((r0, r1)) = geom.row_range(ymin, ymax, height) {
            for row in &mut rows[r0..=r1] {
                row.push(i as u32);
            }
        }
    }

    let per_row: Vec<Vec<(u32, [(u32, f64); 3])>> = rows
        .par_iter()
        .enumerate()
        .map(|(r, bucket)| {
            let mut hit: Vec<Option<[(u32, f64); 3]>> = vec![None; width];
            let y = geom.center(r, 0)[1];
            for &ti in bucket {
                let t = tris[ti as usize];
                let pts = t.map(|v| mesh.xy(v as usize));
                let xmin = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let xmax = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
                let Some((c0, c1)) = geom.col_range(xmin, xmax, width) else { continue };
                for (c, slot) in hit.iter_mut().enumerate().take(c1 + 1).skip(c0) {
                    if slot.is_some() {
                        continue;
                    }
                    let x = geom.center(r, c)[0];
                    let l = barycentric(pts, [x, y]);
                    if l.iter().all(|&v| v >= INSIDE_TOL) {
                        *slot = Some(normalize_weights(t, l));
                    }
                }
            }
            hit.into_iter().enumerate().filter_map(|(c, w)| w.map(|w| ((r * width + c) as u32, w))).collect()
        })
        .collect();

    let mut valid = vec![false; height * width];
    let mut pixel_index = Vec::new();
    let mut row_ptr = vec![0u32];
    let mut vertex = Vec::new();
    let mut weight = Vec::new();
    for (pix, w) in per_row.into_iter().flatten() {
        valid[pix as usize] = true;
        pixel_index.push(pix);
        for (v, wt) in w {
            if wt > 0.0 {
                vertex.push(v);
                weight.push(wt);
            }
        }
        row_ptr.push(vertex.len() as u32);
    }
    Ok(ResampleGrid {
        pixel_mm,
        origin_xy,
        n_vertices: mesh.n_vertices(),
        mask: Arc::new(ValidMask { height, width, valid }),
        pixel_index,
        row_ptr,
        vertex,
        weight,
    })
}

fn normalize_weights(t: [u32; 3], l: [f64; 3]) -> [(u32, f64); 3] {
    let c = l.map(|v| v.clamp(0.0, 1.0));
    let s: f64 = c.iter().sum();
    [(t[0], c[0] / s), (t[1], c[1] / s), (t[2], c[2] / s)]
}

#[derive(Clone, Copy)]
struct Geometry {
    pixel_mm: f64,
    origin_xy: [f64; 2],
}

impl Geometry {
    fn center(&self, row: usize, col: usize) -> [f64; 2] {
        [self.origin_xy[0] + (col as f64 + 0.5) * self.pixel_mm, self.origin_xy[1] - (row as f64 + 0.5) * self.pixel_mm]
    }

    // pixel ranges are padded by one on each side; the barycentric test decides
    fn row_range(&self, ymin: f64, ymax: f64, height: usize) -> Option<(usize, usize)> {
        let a = ((self.origin_xy[1] - ymax) / self.pixel_mm - 0.5).floor() - 1.0;
        let b = ((self.origin_xy[1] - ymin) / self.pixel_mm - 0.5).ceil() + 1.0;
        clamp_range(a, b, height)
    }

    fn col_range(&self, xmin: f64, xmax: f64, width: usize) -> Option<(usize, usize)> {
        let a = ((xmin - self.origin_xy[0]) / self.pixel_mm - 0.5).floor() - 1.0;
        let b = ((xmax - self.origin_xy[0]) / self.pixel_mm - 0.5).ceil() + 1.0;
        clamp_range(a, b, width)
    }
}

fn clamp_range(a: f64, b: f64, n: usize) -> Option<(usize, usize)> {
    if b < 0.0 || a > (n - 1) as f64 {
        return None;
    }
    Some((a.max(0.0) as usize, b.min((n - 1) as f64) as usize))
}

impl ResampleGrid {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn pixel_mm(&self) -> f64 {
        self.pixel_mm
    }

    pub fn origin_xy(&self) -> [f64; 2] {
        self.origin_xy
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn mask(&self) -> &Arc<ValidMask> {
        &self.mask
    }

    pub fn n_valid(&self) -> usize {
        self.pixel_index.len()
    }

    /// Centre of pixel `(row, col)` in flat-map millimetres.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        Geometry { pixel_mm: self.pixel_mm, origin_xy: self.origin_xy }.center(row, col)
    }

    /// Linear indices of valid pixels, row-major.
    /// Stored interpolation weights.
    pub fn nnz(&self) -> usize {
        self.weight.len()
    }

    pub fn valid_pixels(&self) -> &[u32] {
        &self.pixel_index
    }

    /// `(vertex, weight)` pairs of the k-th valid pixel.
    pub fn weights(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[k] as usize, self.row_ptr[k + 1] as usize);
        self.vertex[a..b].iter().zip(&self.weight[a..b]).map(|(&v, &w)| (v as usize, w))
    }

    /// Interpolation weights for the pixel at linear index `pixel`, if valid.
    pub fn weights_at(&self, pixel: usize) -> Option<Vec<(usize, f64)>> {
        let k = self.pixel_index.binary_search(&(pixel as u32)).ok()?;
        Some(self.weights(k).collect())
    }

    /// Sparse matrix-vector product from per-vertex values to a frame.
    pub fn resample(&self, vertex_values: &[f64]) -> Result<FlatFrame> {
        if vertex_values.len() != self.n_vertices {
            return Err(Error::Dimension(format!(
                "{} vertex values for a grid built on {} vertices",
                vertex_values.len(),
                self.n_vertices
            )));
        }
        let mut pixels = vec![0.0; self.mask.len()];
        for (k, &pix) in self.pixel_index.iter().enumerate() {
            pixels[pix as usize] = self.weights(k).map(|(v, w)| w * vertex_values[v]).sum();
        }
        Ok(FlatFrame { pixels, mask: Arc::clone(&self.mask) })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(FGRID_MAGIC);
        w.u32(self.mask.height as u32);
        w.u32(self.mask.width as u32);
        w.u32(self.n_vertices as u32);
        w.f64(self.pixel_mm);
        w.f64(self.origin_xy[0]);
        w.f64(self.origin_xy[1]);
        let mut bits = vec![0u8; self.mask.len().div_ceil(8)];
        for (i, &ok) in self.mask.valid.iter().enumerate() {
            if ok {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.raw(&bits);
        w.u32(self.vertex.len() as u32);
        for p in &self.row_ptr {
            w.u32(*p);
        }
        for v in &self.vertex {
            w.u32(*v);
        }
        for x in &self.weight {
            w.f64(*x);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "FGRID1");
        r.magic(FGRID_MAGIC)?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n_vertices = r.u32()? as usize;
        let pixel_mm = r.f64()?;
        let origin_xy = [r.f64()?, r.f64()?];
        let n = height.checked_mul(width).ok_or_else(|| Error::Format("FGRID1: dimensions overflow".into()))?;
        let bits = r.bytes(n.div_ceil(8))?;
        let valid: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let pixel_index: Vec<u32> = valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i as u32).collect();
        let nnz = r.u32()? as usize;
        let mut row_ptr = Vec::with_capacity(pixel_index.len() + 1);
        for _ in 0..=pixel_index.len() {
            row_ptr.push(r.u32()?);
        }
        let mut vertex = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            vertex.push(r.u32()?);
        }
        let mut weight = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            weight.push(r.f64()?);
        }
        r.finish()?;
        if row_ptr[0] != 0
            || *row_ptr.last().unwrap() as usize != nnz
            || row_ptr.windows(2).any(|w| w[1] < w[0] || w[1] - w[0] > 3)
        {
            return Err(Error::Format("FGRID1: malformed row pointers".into()));
        }
        if vertex.iter().any(|&v| v as usize >= n_vertices) {
            return Err(Error::Format("FGRID1: weight references a vertex out of range".into()));
        }
        Ok(Self {
            pixel_mm,
            origin_xy,
            n_vertices,
            mask: Arc::new(ValidMask { height, width, valid }),
            pixel_index,
            row_ptr,
            vertex,
            weight,
        })
    }

    /// SHA-256 of the serialized grid; stamped into shard headers.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Free-function form of [`ResampleGrid::resample`].
pub fn resample_frame(grid: &ResampleGrid, vertex_values: &[f64]) -> Result<FlatFrame> {
    grid.resample(vertex_values)
}

/// One flat-map image. Background pixels hold exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatFrame {
    pub pixels: Vec<f64>,
    pub mask: Arc<ValidMask>,
}

impl FlatFrame {
    pub fn zeros(mask: Arc<ValidMask>) -> Self {
        Self { pixels: vec![0.0; mask.len()], mask }
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.mask.len() {
            return Err(Error::Dimension(format!(
                "frame has {} pixels, mask has {}",
                self.pixels.len(),
                self.mask.len()
            )));
        }
        if let Some(i) = self.pixels.iter().zip(&self.mask.valid).position(|(&x, &ok)| !ok && x != 0.0) {
            return Err(Error::Invariant(format!("background pixel {i} is {}", self.pixels[i])));
        }
        Ok(())
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        self.pixels.iter().zip(&self.mask.valid).filter(|(_, &ok)| ok).map(|(&x, _)| x)
    }
}
