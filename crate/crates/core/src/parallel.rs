//! Worker pool selection.
//!
//! Kernels use whatever rayon pool they are called from. Output elements
//! have exactly one writer and a fixed accumulation order, so results do
//! not depend on the worker count.

use rayon::ThreadPoolBuilder;

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "IM2WIN_WORKERS";

/// Worker count requested through [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Largest useful worker count on this machine.
pub fn max_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("failed to build worker pool");
    pool.install(f)
}
