//! Index-parallel map with a sequential fallback when the `parallel`
//! feature is off. Output order always follows the index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
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
        map_range_seq(n, f)
    }
}

/// Always-sequential form of [`map_range`].
pub fn map_range_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
