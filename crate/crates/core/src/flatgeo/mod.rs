//! Flat-map geometry: the flattened surface mesh, the regular pixel grid
//! fitted over it and the barycentric resampler between the two.

mod grid;
mod mesh;

pub use grid::{barycentric, build_grid, resample_frame, FlatFrame, ResampleGrid, ValidMask, FGRID_MAGIC, INSIDE_TOL};
pub use mesh::{load_mesh, FlatMesh, FMESH_MAGIC};
