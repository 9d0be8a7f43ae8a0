//! The worker pool behind the parallel parts of the pipeline: image
//! synthesis and per-image inference. Both fold their results in a fixed
//! index order, so thread count never changes any output byte. Training is
//! deliberately sequential and does not touch this pool.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// Shared worker pool. Sized by the `BILORA_THREADS` environment variable
/// when it holds a positive integer, otherwise by available parallelism.
pub fn thread_pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let n = std::env::var("BILORA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        ThreadPoolBuilder::new()
            .num_threads(n)
            .thread_name(|i| format!("bilora-worker-{i}"))
            .build()
            .expect("building worker pool")
    })
}
