//! Execution helpers: data-parallel maps with deterministic results.
//!
//! All reductions that touch floating point are either per-item maps gathered
//! in input order or chunked with fixed chunk boundaries and merged in chunk
//! order, so results are bit-identical whether the `parallel` feature is on,
//! off, or throttled via [`set_parallel`]. Integer count merges commute
//! exactly and may be reduced in any order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon code paths at runtime. No effect when the
/// crate is built without the `parallel` feature. Results are identical
/// either way; this exists for benchmarking the sequential fallback.
pub fn set_parallel(on: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(on, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Caps the worker pool: 0 keeps the default, 1 switches to the sequential
/// paths, larger values size the global rayon pool. Call at most once,
/// before any parallel work.
pub fn set_thread_count(n: usize) -> crate::error::Result<()> {
    match n {
        0 => Ok(()),
        1 => {
            set_parallel(false);
            Ok(())
        }
        _ => {
            #[cfg(feature = "parallel")]
            {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| {
                        crate::error::Error::config(format!("thread pool already running: {e}"))
                    })
            }
            #[cfg(not(feature = "parallel"))]
            {
                Err(crate::error::Error::config(
                    "built without the parallel feature; only 1 thread is available",
                ))
            }
        }
    }
}

/// Map over a slice, gathering results in input order.
pub(crate) fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Rows per chunk for counting and batch kernels. Fixed so that chunk
/// boundaries (and therefore float reduction order) never depend on the
/// thread count.
pub(crate) const ROW_CHUNK: usize = 16_384;

/// Accumulate `u64` histograms over row chunks and merge them. Integer
/// addition commutes exactly, so the merge order is irrelevant.
pub(crate) fn chunked_counts<F>(n_rows: usize, n_bins: usize, count: F) -> Vec<u64>
where
    F: Fn(std::ops::Range<usize>, &mut [u64]) + Sync + Send,
{
    if n_rows == 0 {
        return vec![0; n_bins];
    }
    let ranges: Vec<std::ops::Range<usize>> = (0..n_rows)
        .step_by(ROW_CHUNK)
        .map(|start| start..(start + ROW_CHUNK).min(n_rows))
        .collect();
    let partials = map_ordered(&ranges, |r| {
        let mut acc = vec![0u64; n_bins];
        count(r.clone(), &mut acc);
        acc
    });
    let mut total = vec![0u64; n_bins];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}
