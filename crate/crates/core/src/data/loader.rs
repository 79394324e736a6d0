use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::shard::Shard;
use crate::error::{Error, Result};
use crate::flatgeo::ResampleGrid;
use crate::prep::{extract_clips, FlatClip, CLIP_LEN};
use crate::rng;

/// Random clip starts for a run of `n_frames`: `floor(4 * n_frames /
/// clip_len)` draws with replacement from every valid start. Runs shorter
/// than a clip give none.
pub fn sample_run_clips(n_frames: usize, clip_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    if clip_len == 0 || n_frames < clip_len {
        log::warn!("run of {n_frames} frames is shorter than a {clip_len}-frame clip; skipped");
        return Vec::new();
    }
    let count = 4 * n_frames / clip_len;
    (0..count).map(|_| rng.random_range(0..=n_frames - clip_len)).collect()
}

/// Bounded pool of clips drawn uniformly without replacement.
#[derive(Debug)]
pub struct ShuffleBuffer<T> {
    items: Vec<T>,
    capacity: usize,
}

impl<T> ShuffleBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self { items: Vec::with_capacity(capacity), capacity }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Hands the item back when the buffer is full.
    pub fn push(&mut self, item: T) -> std::result::Result<(), T> {
        if self.is_full() {
            return Err(item);
        }
        self.items.push(item);
        Ok(())
    }

    pub fn draw(&mut self, rng: &mut impl Rng) -> Option<T> {
        if self.items.is_empty() {
            return None;
        }
        let i = rng.random_range(0..self.items.len());
        Some(self.items.swap_remove(i))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub capacity: usize,
    /// 1 gives the deterministic in-thread loader.
    pub workers: usize,
    pub clip_len: usize,
    pub seed: u64,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self { batch_size: 32, capacity: 2048, workers: 1, clip_len: CLIP_LEN, seed: 0 }
    }
}

impl LoaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.capacity < self.batch_size {
            return Err(Error::Config(format!(
                "buffer capacity {} must be at least the batch size {} (>= 1)",
                self.capacity, self.batch_size
            )));
        }
        if self.workers == 0 || self.clip_len == 0 {
            return Err(Error::Config("workers and clip_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderStats {
    pub shards_read: u64,
    pub shards_failed: u64,
    pub clips_produced: u64,
    pub clips_drawn: u64,
    pub batches: u64,
}

#[derive(Default)]
struct Counters {
    shards_read: AtomicU64,
    shards_failed: AtomicU64,
    clips_produced: AtomicU64,
    clips_drawn: AtomicU64,
    batches: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> LoaderStats {
        LoaderStats {
            shards_read: self.shards_read.load(Ordering::Relaxed),
            shards_failed: self.shards_failed.load(Ordering::Relaxed),
            clips_produced: self.clips_produced.load(Ordering::Relaxed),
            clips_drawn: self.clips_drawn.load(Ordering::Relaxed),
            batches: self.batches.load(Ordering::Relaxed),
        }
    }
}

/// Shared read-only state for producers.
struct Source {
    shards: Vec<PathBuf>,
    grid: ResampleGrid,
    cfg: LoaderConfig,
    bad: Vec<AtomicBool>,
    n_bad: AtomicUsize,
    counters: Counters,
}

impl Source {
    /// Clips of one shard for pass `pass`, or `None` if the shard is
    /// unusable (it is then skipped from now on).
    fn clips(&self, index: usize, pass: u64) -> Option<Vec<FlatClip>> {
        if self.bad[index].load(Ordering::Relaxed) {
            return None;
        }
        let path = &self.shards[index];
        let loaded = Shard::load(path).and_then(|s| s.to_clip(&self.grid));
        let clips = loaded.and_then(|video| {
            let mut r = rng::stream2(self.cfg.seed, pass + 1, index as u64);
            let starts = sample_run_clips(video.n_frames, self.cfg.clip_len, &mut r);
            extract_clips(&video, self.cfg.clip_len, &starts)
        });
        match clips {
            Ok(c) if !c.is_empty() => {
                self.counters.shards_read.fetch_add(1, Ordering::Relaxed);
                self.counters.clips_produced.fetch_add(c.len() as u64, Ordering::Relaxed);
                Some(c)
            }
            other => {
                if let Err(e) = other {
                    log::warn!("skipping shard {}: {e}", path.display());
                }
                if !self.bad[index].swap(true, Ordering::Relaxed) {
                    self.n_bad.fetch_add(1, Ordering::Relaxed);
                    self.counters.shards_failed.fetch_add(1, Ordering::Relaxed);
                }
                None
            }
        }
    }

    fn all_bad(&self) -> bool {
        self.n_bad.load(Ordering::Relaxed) == self.shards.len()
    }

    fn dead(&self) -> Error {
        Error::InsufficientData(format!("none of the {} shards yielded a clip", self.shards.len()))
    }

    /// Shard visiting order for a pass.
    fn order(&self, pass: u64) -> Vec<usize> {
        let mut o: Vec<usize> = (0..self.shards.len()).collect();
        o.shuffle(&mut rng::stream2(self.cfg.seed, 0, pass));
        o
    }
}

struct Shared {
    buffer: Mutex<ShuffleBuffer<FlatClip>>,
    changed: Condvar,
    stop: AtomicBool,
}

enum Mode {
    Inline { buffer: ShuffleBuffer<FlatClip>, pending: Vec<FlatClip>, pass: u64, queue: Vec<usize> },
    Threads { shared: Arc<Shared>, handles: Vec<JoinHandle<()>> },
}

/// Endless stream of batches. Producers read shards in a seeded order,
/// cut random clips and append them to a shuffle buffer; each batch draws
/// `batch_size` clips uniformly from the buffer once it is full.
pub struct Loader {
    source: Arc<Source>,
    mode: Mode,
    rng: rng::Rng,
}

impl Loader {
    pub fn new(shards: Vec<PathBuf>, grid: ResampleGrid, cfg: LoaderConfig) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(Error::InsufficientData("no shards given".into()));
        }
        let n = shards.len();
        let source = Arc::new(Source {
            shards,
            grid,
            bad: (0..n).map(|_| AtomicBool::new(false)).collect(),
            n_bad: AtomicUsize::new(0),
            counters: Counters::default(),
            cfg: cfg.clone(),
        });
        let mode = if cfg.workers == 1 {
            Mode::Inline { buffer: ShuffleBuffer::new(cfg.capacity), pending: Vec::new(), pass: 0, queue: Vec::new() }
        } else {
            let shared = Arc::new(Shared {
                buffer: Mutex::new(ShuffleBuffer::new(cfg.capacity)),
                changed: Condvar::new(),
                stop: AtomicBool::new(false),
            });
            let handles = (0..cfg.workers)
                .map(|w| {
                    let (source, shared) = (Arc::clone(&source), Arc::clone(&shared));
                    std::thread::spawn(move || produce(w, &source, &shared))
                })
                .collect();
            Mode::Threads { shared, handles }
        };
        let rng = rng::stream(cfg.seed, u64::MAX);
        Ok(Self { source, mode, rng })
    }

    pub fn stats(&self) -> LoaderStats {
        self.source.counters.snapshot()
    }

    pub fn next_batch(&mut self) -> Result<Vec<FlatClip>> {
        let bs = self.source.cfg.batch_size;
        let batch = match &mut self.mode {
            Mode::Inline { buffer, pending, pass, queue } => {
                while !buffer.is_full() {
                    if let Some(c) = pending.pop() {
                        let _ = buffer.push(c);
                        continue;
                    }
                    if queue.is_empty() {
                        if self.source.all_bad() {
                            return Err(self.source.dead());
                        }
                        *queue = self.source.order(*pass);
                        queue.reverse();
                        *pass += 1;
                    }
                    let i = queue.pop().unwrap();
                    if let Some(mut c) = self.source.clips(i, *pass - 1) {
                        c.reverse();
                        *pending = c;
                    }
                }
                (0..bs).map(|_| buffer.draw(&mut self.rng).unwrap()).collect()
            }
            Mode::Threads { shared, .. } => {
                let mut buf = shared.buffer.lock().unwrap();
                loop {
                    if buf.is_full() {
                        break;
                    }
                    if self.source.all_bad() {
                        return Err(self.source.dead());
                    }
                    buf = shared.changed.wait(buf).unwrap();
                }
                let b: Vec<FlatClip> = (0..bs).map(|_| buf.draw(&mut self.rng).unwrap()).collect();
                drop(buf);
                shared.changed.notify_all();
                b
            }
        };
        let c = &self.source.counters;
        c.clips_drawn.fetch_add(bs as u64, Ordering::Relaxed);
        c.batches.fetch_add(1, Ordering::Relaxed);
        Ok(batch)
    }
}

impl Iterator for Loader {
    type Item = Result<Vec<FlatClip>>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        if let Mode::Threads { shared, handles } = &mut self.mode {
            shared.stop.store(true, Ordering::Relaxed);
            shared.changed.notify_all();
            for h in handles.drain(..) {
                let _ = h.join();
            }
        }
    }
}

fn produce(worker: usize, source: &Source, shared: &Shared) {
    let workers = source.cfg.workers;
    for pass in 0u64.. {
        let mine: Vec<usize> = source.order(pass).into_iter().filter(|i| i % workers == worker).collect();
        if mine.iter().all(|&i| source.bad[i].load(Ordering::Relaxed)) {
            // nothing left for this worker; wake the consumer in case every shard is gone
            shared.changed.notify_all();
            return;
        }
        for i in mine {
            let Some(clips) = source.clips(i, pass) else {
                shared.changed.notify_all();
                continue;
            };
            for clip in clips {
                let mut buf = shared.buffer.lock().unwrap();
                let mut item = clip;
                loop {
                    if shared.stop.load(Ordering::Relaxed) {
                        return;
                    }
                    match buf.push(item) {
                        Ok(()) => break,
                        Err(back) => {
                            item = back;
                            shared.changed.notify_all();
                            buf = shared.changed.wait(buf).unwrap();
                        }
                    }
                }
                drop(buf);
                shared.changed.notify_all();
            }
        }
    }
}

/// Frames seen over a run of `steps` batches of `clip_len`-frame clips.
pub fn frames_seen(steps: u64, batch_size: u64, clip_len: u64) -> u64 {
    steps * batch_size * clip_len
}

/// Passes over a `dataset_frames` training set implied by `total_frames`.
pub fn effective_epochs(total_frames: f64, dataset_frames: f64) -> f64 {
    total_frames / dataset_frames
}
