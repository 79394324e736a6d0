//! Shard files and the streaming shuffle-buffer loader.

mod loader;
mod shard;

pub use loader::{effective_epochs, frames_seen, sample_run_clips, Loader, LoaderConfig, LoaderStats, ShuffleBuffer};
pub use shard::{load_run, run_from_bytes, run_to_bytes, save_run, Shard, FMRUN_MAGIC, FMSHRD_MAGIC};
