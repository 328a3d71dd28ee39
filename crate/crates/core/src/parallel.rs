//! Deterministic parallel helpers.
//!
//! Work is partitioned by index or by fixed-size block, never by worker
//! count, and per-item arithmetic is self-contained, so results are
//! bit-identical no matter how many rayon threads execute them.

use rayon::prelude::*;

/// Order-preserving parallel map over `0..n`.
pub fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Run `f` inside a rayon pool of exactly `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("failed to build thread pool");
    pool.install(f)
}
