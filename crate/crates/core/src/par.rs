//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it (or
//! after [`set_enabled(false)`](set_enabled)) they run on the calling thread.
//! Every helper produces results in index order and every reduction is
//! performed in a fixed order, so outputs are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Toggle parallel execution at runtime. Has no effect without the
/// `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Use `workers` threads; 1 (or 0) runs everything on the calling thread.
/// The pool size can only be fixed once per process, so later calls just
/// toggle parallel dispatch.
pub fn set_workers(workers: usize) {
    set_enabled(workers > 1);
    #[cfg(feature = "parallel")]
    if workers > 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

/// Whether helpers currently dispatch to the thread pool.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Map `f` over `0..n`, collecting in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if enabled() {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let out = map_range(1000, |i| i * i);
        assert_eq!(out, (0..1000).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_see_their_index() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
