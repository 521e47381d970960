//! Bounded worker pools.

use crate::error::{Error, Result};

/// Runs `f` inside a rayon pool with exactly `workers` threads.
pub fn install<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("building worker pool: {e}")))?;
    Ok(pool.install(f))
}
