//! Thin switch between rayon and sequential loops.
//!
//! Every parallel site splits work over independent output regions and never
//! splits a reduction, so results are bit-identical whether the `parallel`
//! feature is on or off and for any rayon thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f` over exact chunks of `data`, in parallel when available.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_exact_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_exact_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Like [`for_each_chunk_mut`] but allows a ragged final chunk.
pub fn for_each_chunk_mut_any<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}
