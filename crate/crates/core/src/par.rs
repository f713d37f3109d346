//! Data parallelism over independent experiment cells.
//!
//! Parallelism lives at the granularity where runs are embarrassingly
//! independent: sweep cells and intervention seeds. Training math inside a
//! cell stays sequential, so results are bitwise identical whatever the
//! thread count. Built without the `parallel` feature, everything runs on
//! one thread with the same signature and the same output order.

use crate::error::Result;

/// Applies `f` to every item, preserving input order in the output.
/// `jobs` = 0 means "use all available cores"; 1 forces sequential even in
/// parallel builds.
pub fn map_jobs<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if jobs != 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .expect("thread pool construction");
            return pool.install(|| items.into_par_iter().map(f).collect());
        }
    }
    let _ = jobs;
    items.into_iter().map(f).collect()
}

/// Like `map_jobs` but for fallible work; the caller gets every cell's
/// outcome rather than losing siblings to the first error.
pub fn try_map_jobs<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Vec<Result<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    map_jobs(items, jobs, f)
}
