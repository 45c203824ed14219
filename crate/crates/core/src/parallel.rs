//! Order-preserving parallel map over indices. The worker count is capped by
//! the `SSG_THREADS` environment variable (default: available cores).

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

pub const THREADS_ENV: &str = "SSG_THREADS";

/// Worker count from `SSG_THREADS`, falling back to the core count.
pub fn thread_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(cores)
}

fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("thread pool")
    })
}

/// `(0..n).map(f)` evaluated on the worker pool; results keep index order.
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if n < 2 || thread_count() == 1 {
        return (0..n).map(f).collect();
    }
    pool().install(|| (0..n).into_par_iter().map(f).collect())
}
