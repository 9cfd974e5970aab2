//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper assigns each output chunk to exactly one task and keeps the
//! per-chunk computation order fixed, so results are bit-identical whether
//! the `parallel` feature is on or off and at any rayon thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each fixed-size chunk of `out` (one chunk per index).
pub(crate) fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Map each index of `0..n` to a value, collecting in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
