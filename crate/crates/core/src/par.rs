//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch onto rayon; without
//! it they run on the calling thread. Every helper is order-preserving and
//! never splits a floating-point reduction across threads, so results are
//! bit-identical between the two builds.

use ndarray::{Array3, Zip};

/// Elementwise maps below this size stay on the calling thread.
const PAR_ELEMENT_THRESHOLD: usize = 1 << 15;

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// `f(i)` for `i in 0..n`, collected in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_range`]; always available so the two can be
/// benchmarked against each other in one binary.
pub fn map_range_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub(crate) fn zip2_map<F>(a: &Array3<f64>, b: &Array3<f64>, f: F) -> Array3<f64>
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if a.len() >= PAR_ELEMENT_THRESHOLD {
        return Zip::from(a).and(b).par_map_collect(|&x, &y| f(x, y));
    }
    let _ = PAR_ELEMENT_THRESHOLD;
    Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
}

pub(crate) fn zip3_map<F>(a: &Array3<f64>, b: &Array3<f64>, c: &Array3<f64>, f: F) -> Array3<f64>
where
    F: Fn(f64, f64, f64) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if a.len() >= PAR_ELEMENT_THRESHOLD {
        return Zip::from(a)
            .and(b)
            .and(c)
            .par_map_collect(|&x, &y, &z| f(x, y, z));
    }
    Zip::from(a).and(b).and(c).map_collect(|&x, &y, &z| f(x, y, z))
}
