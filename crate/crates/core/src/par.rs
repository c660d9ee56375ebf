//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Every helper produces results in index
//! order and never reorders floating-point reductions, so outputs are
//! bit-identical between the two builds.

use ndarray::{Array2, ArrayViewMut1, Axis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether this build runs the helpers on the rayon pool.
pub const PARALLEL: bool = cfg!(feature = "parallel");

/// Rows below this count are processed inline; spawning costs more than it saves.
const MIN_PARALLEL_ROWS: usize = 64;

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= 2 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Like [`map_indices`] but stays inline below the row threshold.
pub fn map_rows<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n >= MIN_PARALLEL_ROWS {
        map_indices(n, f)
    } else {
        (0..n).map(f).collect()
    }
}

/// Apply `f(row_index, row)` to every row of `m`.
pub fn for_each_row_mut<F>(m: &mut Array2<f64>, f: F)
where
    F: Fn(usize, ArrayViewMut1<'_, f64>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if m.nrows() >= MIN_PARALLEL_ROWS {
            m.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    m.axis_iter_mut(Axis(0))
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Run `f` with parallelism disabled for the current thread's work.
///
/// Used by benchmarks to time the sequential path inside a parallel build.
pub fn sequential<R: Send, F: FnOnce() -> R + Send>(f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}
