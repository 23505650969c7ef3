//! Execution backends for the particle loops.
//!
//! Every reduction goes through fixed-size chunks whose partial sums are
//! combined left to right, so results are bit-identical between the
//! sequential and the rayon backend and across thread counts.

use serde::{Deserialize, Serialize};

/// Number of particles per work item and per partial sum.
pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sequential,
    /// Rayon work-stealing pool. Falls back to sequential execution when the
    /// crate is built without the `parallel` feature.
    Parallel,
}

impl Default for Backend {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Backend::Parallel
        } else {
            Backend::Sequential
        }
    }
}

impl Backend {
    #[inline]
    fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Backend::Parallel
    }
}

/// Applies `f` to every item, possibly concurrently.
pub fn for_each_mut<T, F>(backend: Backend, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if backend.is_parallel() {
        use rayon::prelude::*;
        items.par_iter_mut().for_each(f);
        return;
    }
    let _ = backend;
    items.iter_mut().for_each(f);
}

/// Maps `0..n` through `f`, keeping output order.
pub fn map_range<R, F>(backend: Backend, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if backend.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = backend;
    (0..n).map(f).collect()
}

/// Sums `width` accumulators over `0..n`; `f(i, acc)` adds particle `i`'s
/// contribution into `acc`.
pub fn chunked_sums<F>(backend: Backend, n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials = map_range(backend, n_chunks, |c| {
        let mut acc = vec![0.0; width];
        let end = ((c + 1) * CHUNK).min(n);
        for i in c * CHUNK..end {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Deterministic sum of `f(i)` over `0..n`.
pub fn chunked_sum<F>(backend: Backend, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    chunked_sums(backend, n, 1, |i, acc| acc[0] += f(i))[0]
}
