//! Orchestration of the cross-view feature pipeline: run configuration,
//! format conversion, per-stage artifacts with hash-stamped caching.

pub mod config;
pub mod convert;
pub mod error;
pub mod matrix;
pub mod pipeline;

pub use config::{FeatureSource, RunConfig};
pub use error::{CliError, Result};
pub use pipeline::{Pipeline, Stage};

/// Caps the global worker pool at `CROSSVIEW_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CROSSVIEW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("CROSSVIEW_THREADS={raw:?} is not a positive integer")))?;
    // A pool that already exists keeps its size; that only happens when a
    // caller initialized rayon before us.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
