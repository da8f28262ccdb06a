//! Order-preserving parallel helpers.
//!
//! Every parallel loop in this crate is a map over an index range collected
//! in index order, so results are bit-identical to the sequential path and
//! independent of thread count. With the `parallel` feature disabled the same
//! functions run sequentially.

/// Maps `f` over `0..n` and collects results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Sequential reference implementation, kept for benchmarks.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f` inside a thread pool of the requested size. `None` keeps the
/// global pool (or plain sequential execution without the `parallel`
/// feature). Pinning the pool size only changes scheduling, never results.
#[cfg(feature = "parallel")]
pub fn with_thread_count<R, F>(threads: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool construction cannot fail with default stack settings")
            .install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_count<R, F>(_threads: Option<usize>, f: F) -> R
where
    F: FnOnce() -> R,
{
    f()
}
