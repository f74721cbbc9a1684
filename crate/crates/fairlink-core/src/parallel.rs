//! Execution facade for the data-parallel loops.
//!
//! All heavy per-item work (sample generation, Monte Carlo realizations,
//! association candidates, per-sample gradients) is expressed as an indexed
//! map. With the `parallel` feature (default) the map runs on rayon; without
//! it the same code runs sequentially. Results are returned in index order
//! either way, and callers reduce in index order, so outputs are identical
//! across both modes and any thread count.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept for direct comparison in benches.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
