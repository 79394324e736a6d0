use std::path::Path;
use std::sync::Arc;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::flatgeo::ResampleGrid;
use crate::prep::{FlatClip, SurfaceRun};

pub const FMSHRD_MAGIC: &[u8; 8] = b"FMSHRD1\0";
pub const FMRUN_MAGIC: &[u8; 7] = b"FMRUN1\0";

/// One preprocessed run on a fixed grid: `n_frames x height x width` f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub tr: f64,
    pub subject_id: String,
    pub run_id: String,
    pub grid_hash: [u8; 32],
    pub frames: Vec<f32>,
}

impl Shard {
    pub fn from_clip(clip: &FlatClip, tr: f64, subject_id: &str, run_id: &str, grid_hash: [u8; 32]) -> Self {
        Self {
            n_frames: clip.n_frames,
            height: clip.height(),
            width: clip.width(),
            tr,
            subject_id: subject_id.into(),
            run_id: run_id.into(),
            grid_hash,
            frames: clip.frames.clone(),
        }
    }

    /// Reattaches the grid's valid mask, refusing shards from another grid.
    pub fn to_clip(&self, grid: &ResampleGrid) -> Result<FlatClip> {
        if self.grid_hash != grid.hash() {
            return Err(Error::Validation(format!(
                "shard {}/{} was written for grid {}, not {}",
                self.subject_id,
                self.run_id,
                hex::encode(self.grid_hash),
                hex::encode(grid.hash())
            )));
        }
        self.to_clip_with(Arc::clone(grid.mask()))
    }

    pub(crate) fn to_clip_with(&self, mask: Arc<crate::flatgeo::ValidMask>) -> Result<FlatClip> {
        if (self.height, self.width) != (mask.height(), mask.width()) {
            return Err(Error::Dimension(format!(
                "shard is {}x{}, grid is {}x{}",
                self.height,
                self.width,
                mask.height(),
                mask.width()
            )));
        }
        let clip = FlatClip::new(self.frames.clone(), mask, 0.0)?;
        for t in 0..clip.n_frames {
            clip.flat_frame(t).validate()?;
        }
        Ok(clip)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(FMSHRD_MAGIC);
        w.u32(self.n_frames as u32);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.f64(self.tr);
        w.string(&self.subject_id);
        w.string(&self.run_id);
        w.raw(&self.grid_hash);
        w.f32s(&self.frames);
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "FMSHRD1");
        r.magic(FMSHRD_MAGIC)?;
        let (n_frames, height, width) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let tr = r.f64()?;
        let subject_id = r.string()?;
        let run_id = r.string()?;
        let grid_hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let n = n_frames
            .checked_mul(height)
            .and_then(|x| x.checked_mul(width))
            .ok_or_else(|| Error::Format("FMSHRD1: frame count overflows".into()))?;
        let frames = r.f32s(n)?;
        r.finish()?;
        Ok(Self { n_frames, height, width, tr, subject_id, run_id, grid_hash, frames })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// FMRUN1: magic, u32 V, u32 T, f64 TR, length-prefixed subject and run
/// ids, then `V x T` f64 values, vertex-major.
pub fn run_to_bytes(run: &SurfaceRun) -> Vec<u8> {
    let mut w = Writer::default();
    w.raw(FMRUN_MAGIC);
    w.u32(run.n_vertices as u32);
    w.u32(run.n_times as u32);
    w.f64(run.tr);
    w.string(&run.subject_id);
    w.string(&run.run_id);
    for &x in &run.values {
        w.f64(x);
    }
    w.buf
}

pub fn run_from_bytes(buf: &[u8]) -> Result<SurfaceRun> {
    let mut r = Reader::new(buf, "FMRUN1");
    r.magic(FMRUN_MAGIC)?;
    let (v, t) = (r.u32()? as usize, r.u32()? as usize);
    let tr = r.f64()?;
    let subject = r.string()?;
    let run = r.string()?;
    let n = v.checked_mul(t).ok_or_else(|| Error::Format("FMRUN1: size overflows".into()))?;
    if r.remaining() != n * 8 {
        return Err(Error::Format(format!("FMRUN1: header promises {n} values, {} bytes follow", r.remaining())));
    }
    let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    SurfaceRun::new(values, v, tr, subject, run)
}

pub fn save_run(run: &SurfaceRun, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &run_to_bytes(run))
}

pub fn load_run(path: impl AsRef<Path>) -> Result<SurfaceRun> {
    run_from_bytes(&read_file(path.as_ref())?)
}
