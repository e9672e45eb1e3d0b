//! Indexed map helper that runs on rayon when the `parallel` feature is
//! enabled and falls back to a plain sequential loop otherwise.
//!
//! Every call site derives the work for index `i` from `i` alone (seeded RNG
//! streams, independent rows), so results are identical across thread counts
//! and across the two compilation modes.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..count).map(f).collect()
}
