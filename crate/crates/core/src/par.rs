//! Data-parallel helpers with a sequential fallback.
//!
//! Everything routed through this module keeps a deterministic result: maps
//! collect in input order and reductions fold the collected values
//! sequentially, so thread count never changes the output. Disabling the
//! `parallel` feature removes the rayon dependency entirely and compiles the
//! sequential bodies.

/// Map `f` over `items`, preserving input order.
#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over an index range, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Always-sequential map over an index range. Benchmarks use this as the
/// baseline against [`map_range`].
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Build a scoped thread pool with `threads` workers and run `op` inside it.
/// With the `parallel` feature off (or `threads == 0`), runs `op` directly on
/// the current thread.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return op();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build thread pool")
        .install(op)
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R>(_threads: usize, op: impl FnOnce() -> R) -> R {
    op()
}
