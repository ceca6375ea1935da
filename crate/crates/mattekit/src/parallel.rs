//! Deterministic data-parallel helpers.
//!
//! Work is partitioned over disjoint output ranges and results are collected
//! in index order, so every reduction happens in a fixed sequence regardless
//! of thread count. With the `parallel` feature the closures run on the rayon
//! pool; without it they run sequentially. Both paths produce bitwise
//! identical results.

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Applies `f` to each `chunk`-sized slice of `buf` (last may be shorter).
/// Chunks are disjoint, so parallel execution cannot race; `f` receives the
/// chunk index for seeding or offset math.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Applies `f` to each `chunk`-sized slice of `buf` (last may be shorter).
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sums `f(i)` for `i in 0..n` in strictly ascending index order.
///
/// The terms may be computed in parallel but the floating-point reduction is
/// always performed sequentially left to right, keeping results bitwise
/// stable across thread counts.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_indexed(n, f).into_iter().sum()
}
