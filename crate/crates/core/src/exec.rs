//! Row-parallel execution helpers.
//!
//! With the `parallel` feature (default) independent row computations run on
//! the rayon pool; without it everything runs on the calling thread. Results
//! are always assembled in index order, so both paths produce bit-identical
//! output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for row-wise kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this build can actually run in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// Evaluate `f(i)` for `i in 0..n` and collect in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Fill `out` in chunks of `width`, chunk `i` written by `f(i, chunk)`.
    pub fn fill_rows<F>(self, out: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => out
                .par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
            _ => out
                .chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
        }
    }
}
