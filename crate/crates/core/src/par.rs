//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon; without
//! it they degrade to plain sequential loops. Results are always collected
//! in index order, so output is identical either way and for any thread
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Fallible variant of [`map_indexed`]; returns the first error by index.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        // Collect everything so the reported error does not depend on
        // which task failed first under the scheduler.
        let results: Vec<Result<T, E>> = (0..n).into_par_iter().map(f).collect();
        results.into_iter().collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
