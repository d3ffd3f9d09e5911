//! Execution strategy for data-parallel loops.
//!
//! With the `parallel` feature (default) work is spread over the current
//! rayon pool; without it every loop runs sequentially. Either way results
//! are bitwise identical: maps are index-addressed and reductions sum
//! fixed-size blocks in block order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per reduction block. Fixed so partial sums never depend on the
/// number of workers.
pub const REDUCE_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
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

impl Execution {
    /// `(0..n).map(f).collect()`, possibly in parallel.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Calls `f(chunk_index, chunk)` on consecutive `chunk`-sized pieces of
    /// `out`.
    pub fn for_each_chunk_mut<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => out
                .par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
            _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }

    /// Sums length-`width` vectors produced per block of `REDUCE_BLOCK` rows.
    /// `f(start, end, acc)` accumulates rows `start..end` into `acc`.
    pub fn block_sum<F>(self, n_rows: usize, width: usize, f: F) -> Vec<f64>
    where
        F: Fn(usize, usize, &mut [f64]) + Sync + Send,
    {
        let n_blocks = n_rows.div_ceil(REDUCE_BLOCK);
        let partials = self.map(n_blocks, |b| {
            let start = b * REDUCE_BLOCK;
            let end = (start + REDUCE_BLOCK).min(n_rows);
            let mut acc = vec![0.0; width];
            f(start, end, &mut acc);
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
}
