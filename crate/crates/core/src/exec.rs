//! Data-parallel map over work items with a sequential fallback.
//!
//! Results come back in input order, so reductions downstream run in a fixed
//! order and training is bitwise reproducible regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for batch-level loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Seq,
    /// Rayon work-stealing pool. Falls back to sequential when the crate is
    /// built without the `parallel` feature.
    Par,
}

impl Exec {
    /// `threads == 1` selects the sequential path; anything else the pool.
    pub fn from_threads(threads: usize) -> Exec {
        if threads == 1 {
            Exec::Seq
        } else {
            Exec::Par
        }
    }
}

/// Order-preserving map.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        Exec::Seq => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Par => items.par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Exec::Par => items.iter().map(f).collect(),
    }
}

/// Order-preserving map over indices, for loops that index shared state.
pub fn map_indices<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Exec::Seq => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Par => (0..n).into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Exec::Par => (0..n).map(f).collect(),
    }
}

/// Run `f` inside a pool of `threads` workers (0 = rayon default). Without
/// the `parallel` feature the closure just runs on the caller's thread.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            f()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool construction")
                .install(f)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
