//! Execution strategy for the data-parallel loops in this crate.
//!
//! Every parallel loop goes through [`map_ordered`] (or [`map_range`]), which
//! collects results in input order. Reductions over those results are done
//! sequentially by the caller, so output is bit-identical whichever strategy
//! runs. Without the `parallel` feature, [`Exec::Parallel`] silently falls
//! back to the sequential path.

/// How to run a data-parallel loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this build can actually run loops in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

pub fn map_ordered<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Ordered map over fixed-size chunks. Chunk boundaries depend only on
/// `chunk_len`, never on the thread count.
pub fn map_chunks<T, R, F>(exec: Exec, items: &[T], chunk_len: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk_len).map(f).collect();
    }
    let _ = exec;
    items.chunks(chunk_len).map(f).collect()
}
