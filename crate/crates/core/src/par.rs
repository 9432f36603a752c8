//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan work out over rayon's global
//! pool; without it (or inside [`sequential`]) they run in index order on the
//! calling thread. Every helper produces its outputs in index order and never
//! splits a single reduction across threads, so results are bit-identical
//! between the two modes.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every helper in this module forced onto the sequential path.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

/// True when the helpers would currently use more than one thread.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f(row_index, row)` to each `width`-wide row of `data`.
///
/// `min_rows_per_task` keeps tiny problems off the pool.
pub fn for_each_row_mut<F>(data: &mut [f64], width: usize, min_rows_per_task: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() / width > min_rows_per_task.max(1) {
        data.par_chunks_mut(width)
            .with_min_len(min_rows_per_task.max(1))
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = min_rows_per_task;
    data.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
