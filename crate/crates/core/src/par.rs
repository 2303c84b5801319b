//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the heavy inner loops — convolution,
//! matrix multiply, attention rows — split their output buffers across a
//! rayon pool. Each chunk is computed exactly as in the sequential path, so
//! results are bit-identical in both modes. Without the feature everything
//! runs sequentially with no rayon dependency.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch used by the benchmarks to compare both modes in one
/// process. Has no effect when the `parallel` feature is disabled.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Cap the rayon pool size (e.g. from the `CYCLEVOS_THREADS` env var). Must
/// be called before any parallel work. Returns false if the pool was already
/// initialized.
#[cfg(feature = "parallel")]
pub fn limit_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn limit_threads(_n: usize) -> bool {
    true
}

/// Split `out` into `chunk` sized pieces and run `f(chunk_index, piece)` on
/// each, in parallel when enabled.
pub fn for_each_chunk_mut<S: Send, F>(out: &mut [S], chunk: usize, f: F)
where
    F: Fn(usize, &mut [S]) + Send + Sync,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
