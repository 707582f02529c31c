//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool.
//! Results always come back in input order, and callers reduce them in that
//! order, so parallel and sequential runs are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// `items.iter().map(f)` collected in order, possibly in parallel.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}
