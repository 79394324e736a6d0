use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const FMESH_MAGIC: &[u8; 7] = b"FMESH1\0";

/// A flattened cortical mesh. Coordinates are in flat-map millimetres; valid
/// vertices lie exactly on the `z = 0` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatMesh {
    vertex_xyz: Vec<[f32; 3]>,
    triangles: Vec<[u32; 3]>,
    valid_vertex: Vec<bool>,
}

impl FlatMesh {
    /// Validates and builds a mesh.
    pub fn new(vertex_xyz: Vec<[f32; 3]>, triangles: Vec<[u32; 3]>, valid_vertex: Vec<bool>) -> Result<Self> {
        let n = vertex_xyz.len();
        if valid_vertex.len() != n {
            return Err(Error::Validation(format!("{} valid flags for {} vertices", valid_vertex.len(), n)));
        }
        for (i, (p, &ok)) in vertex_xyz.iter().zip(&valid_vertex).enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Validation(format!("vertex {i} has a non-finite coordinate")));
            }
            if ok && p[2] != 0.0 {
                return Err(Error::Validation(format!("valid vertex {i} has z = {}", p[2])));
            }
        }
        for (f, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v as usize >= n) {
                return Err(Error::Validation(format!(
                    "triangle {f} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            if is_degenerate(&vertex_xyz, tri) {
                return Err(Error::Validation(format!("triangle {f} {tri:?} has zero area")));
            }
        }
        Ok(Self { vertex_xyz, triangles, valid_vertex })
    }

    /// Builds a mesh where validity follows the flat-map rule: a vertex is
    /// valid iff its z coordinate is exactly zero.
    pub fn from_z_rule(vertex_xyz: Vec<[f32; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let valid = vertex_xyz.iter().map(|p| p[2] == 0.0).collect();
        Self::new(vertex_xyz, triangles, valid)
    }

    pub fn vertex_xyz(&self) -> &[[f32; 3]] {
        &self.vertex_xyz
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn valid_vertex(&self) -> &[bool] {
        &self.valid_vertex
    }

    pub fn n_vertices(&self) -> usize {
        self.vertex_xyz.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid_vertex.iter().filter(|&&v| v).count()
    }

    pub fn xy(&self, v: usize) -> [f64; 2] {
        let p = self.vertex_xyz[v];
        [p[0] as f64, p[1] as f64]
    }

    /// Triangles whose three vertices are all valid, in face order.
    pub fn valid_triangles(&self) -> impl Iterator<Item = (usize, [u32; 3])> + '_ {
        self.triangles
            .iter()
            .enumerate()
            .filter(|(_, t)| t.iter().all(|&v| self.valid_vertex[v as usize]))
            .map(|(i, t)| (i, *t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(FMESH_MAGIC);
        w.u32(self.vertex_xyz.len() as u32);
        w.u32(self.triangles.len() as u32);
        for p in &self.vertex_xyz {
            for c in p {
                w.f32(*c);
            }
        }
        for t in &self.triangles {
            for v in t {
                w.u32(*v);
            }
        }
        for &ok in &self.valid_vertex {
            w.u8(ok as u8);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "FMESH1");
        r.magic(FMESH_MAGIC)?;
        let nv = r.u32()? as usize;
        let nf = r.u32()? as usize;
        // 12 bytes per vertex coordinate triple, 12 per face, 1 per flag
        let expected = nv
            .checked_mul(13)
            .and_then(|a| nf.checked_mul(12).and_then(|b| a.checked_add(b)))
            .ok_or_else(|| Error::Format("FMESH1: dimensions overflow".into()))?;
        if bytes.len() - 15 != expected {
            return Err(Error::Format(format!(
                "FMESH1: header declares {nv} vertices / {nf} triangles ({expected} payload bytes) but file has {}",
                bytes.len() - 15
            )));
        }
        let coords = r.f32s(nv * 3)?;
        let vertex_xyz = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut triangles = Vec::with_capacity(nf);
        for _ in 0..nf {
            triangles.push([r.u32()?, r.u32()?, r.u32()?]);
        }
        let mut valid = Vec::with_capacity(nv);
        for i in 0..nv {
            match r.u8()? {
                0 => valid.push(false),
                1 => valid.push(true),
                b => return Err(Error::Format(format!("FMESH1: valid flag {b} at vertex {i}"))),
            }
        }
        r.finish()?;
        Self::new(vertex_xyz, triangles, valid)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

/// Reads and validates an FMESH1 file.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<FlatMesh> {
    let path = path.as_ref();
    let mesh = FlatMesh::from_bytes(&read_file(path)?)?;
    log::info!(
        "loaded {}: {} vertices ({} valid), {} triangles",
        path.display(),
        mesh.n_vertices(),
        mesh.n_valid(),
        mesh.n_triangles()
    );
    Ok(mesh)
}

fn is_degenerate(xyz: &[[f32; 3]], tri: &[u32; 3]) -> bool {
    let p = tri.map(|v| xyz[v as usize].map(|c| c as f64));
    let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
    let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
    let cross = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
    let area2 = cross.iter().map(|c| c * c).sum::<f64>().sqrt();
    let scale = [e1, e2].iter().map(|e| e.iter().map(|c| c * c).sum::<f64>()).fold(0.0, f64::max);
    area2 <= 1e-12 * scale
}
