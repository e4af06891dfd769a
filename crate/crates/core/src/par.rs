//! Data-parallel helpers backed by rayon, with a sequential fallback when the
//! `parallel` feature is disabled.
//!
//! All helpers are deterministic: work is split at fixed boundaries and
//! results are combined in index order, so outputs are bit-identical across
//! thread counts and across the parallel/sequential builds.

/// Minimum number of elements before a loop is worth parallelizing.
pub const PAR_MIN_LEN: usize = 2048;

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;

    /// Split `data` into fixed-size chunks and run `f(chunk_index, chunk)` on
    /// each, in parallel. Chunk boundaries do not depend on thread count.
    pub fn for_each_chunk_mut<T: Send, F>(data: &mut [T], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk_len = chunk_len.max(1);
        if data.len() <= super::PAR_MIN_LEN {
            for (i, c) in data.chunks_mut(chunk_len).enumerate() {
                f(i, c);
            }
        } else {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
    }

    /// Map `f` over `0..n`, collecting results in index order.
    pub fn map_range<U: Send, F>(n: usize, f: F) -> Vec<U>
    where
        F: Fn(usize) -> U + Sync + Send,
    {
        if n <= 64 {
            (0..n).map(f).collect()
        } else {
            (0..n).into_par_iter().map(f).collect()
        }
    }

    /// Map `f` over a slice, collecting results in index order.
    pub fn map_slice<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
    where
        F: Fn(&T) -> U + Sync + Send,
    {
        if items.len() <= 64 {
            items.iter().map(f).collect()
        } else {
            items.par_iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [T]),
    {
        let chunk_len = chunk_len.max(1);
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }

    pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
    where
        F: Fn(usize) -> U,
    {
        (0..n).map(f).collect()
    }

    pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        F: Fn(&T) -> U,
    {
        items.iter().map(f).collect()
    }
}

pub use imp::{for_each_chunk_mut, map_range, map_slice};

/// Run `f(row_index, row)` over the rows of a row-major buffer.
pub fn for_each_row_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && data.len() % row_len == 0);
    for_each_chunk_mut(data, row_len, f);
}
