//! Batch-level execution helpers.
//!
//! Every data-parallel loop in the workspace goes through [`map`] or
//! [`map_fold`]. With the `parallel` feature the closure runs on the rayon
//! pool; without it (or after [`set_parallel(false)`](set_parallel)) it runs
//! in index order on the calling thread. Results are always produced and
//! combined in index order, so both paths give bit-identical output.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables the rayon path at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

/// Whether batch loops currently run on the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::SeqCst)
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Evaluates `f(0..n)` and feeds each result to `fold` in index order.
///
/// The sequential path folds as it goes and never holds more than one
/// partial result.
pub fn map_fold<R, F, G>(n: usize, f: F, mut fold: G)
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
    G: FnMut(usize, R),
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        let parts: Vec<R> = (0..n).into_par_iter().map(f).collect();
        for (i, r) in parts.into_iter().enumerate() {
            fold(i, r);
        }
        return;
    }
    for i in 0..n {
        fold(i, f(i));
    }
}

/// Applies `f` to each element of `items` in place.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
        return;
    }
    for (i, t) in items.iter_mut().enumerate() {
        f(i, t);
    }
}
