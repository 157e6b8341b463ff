//! Batch-level parallelism.
//!
//! Work is split into per-thread chunks processed by rayon when the
//! `parallel` feature is on; without it (or with one thread) everything runs
//! sequentially on the calling thread. One thread is the strict default:
//! results are then independent of this module entirely. With more threads,
//! gradient accumulation order is fixed per thread count, so a given
//! `(seed, threads)` pair is still bit-reproducible run to run.

/// Worker-count cap read from `HBRIDGE_THREADS`; defaults to 1 so runs are
/// strictly deterministic unless parallelism is asked for.
pub fn threads_from_env() -> usize {
    std::env::var("HBRIDGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub struct ThreadRunner {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl ThreadRunner {
    pub fn new(threads: usize) -> ThreadRunner {
        let threads = threads.max(1);
        #[cfg(feature = "parallel")]
        {
            let pool = (threads > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("rayon pool")
            });
            ThreadRunner { threads, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            // Sequential fallback: the requested width is remembered only for
            // chunk shaping so results match a parallel build at the same
            // thread count.
            ThreadRunner { threads }
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Run `f(index, item)` over the items, in parallel when available.
    /// Items are processed independently; callers own the determinism story
    /// by keeping per-item state disjoint.
    pub fn run<T, F>(&self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            pool.install(|| {
                items
                    .par_iter_mut()
                    .enumerate()
                    .for_each(|(i, item)| f(i, item));
            });
            return;
        }
        for (i, item) in items.iter_mut().enumerate() {
            f(i, item);
        }
    }

    /// Contiguous chunk bounds assigning `n` items to the worker slots.
    pub fn chunk_bounds(&self, n: usize) -> Vec<(usize, usize)> {
        let workers = self.threads.min(n.max(1));
        let base = n / workers;
        let extra = n % workers;
        let mut bounds = Vec::with_capacity(workers);
        let mut lo = 0;
        for w in 0..workers {
            let len = base + usize::from(w < extra);
            bounds.push((lo, lo + len));
            lo += len;
        }
        bounds
    }
}
