//! Execution mode for the data-parallel kernels.
//!
//! With the `parallel` feature (default) the row kernels, batched evaluation
//! and sweeps fan out over a rayon pool; without it everything runs on the
//! calling thread. Every parallel path computes each output element with the
//! same operation order as the sequential path, so results are bit-identical
//! in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

/// Minimum number of scalar multiply-adds before a kernel splits rows.
pub const PAR_MIN_WORK: usize = 1 << 15;

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

/// Forces a mode at runtime. `Parallel` is a no-op without the feature.
pub fn set_mode(mode: Mode) {
    SEQUENTIAL.store(mode == Mode::Sequential, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::Relaxed) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Whether work should actually be split: parallel mode with more than one worker.
#[cfg(feature = "parallel")]
fn fan_out() -> bool {
    mode() == Mode::Parallel && rayon::current_num_threads() > 1
}

/// Caps the global pool. Must run before any parallel work; later calls are ignored.
pub fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n.max(1));
        }
        let _ = builder.build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Applies `f(row_index, row)` to each `row_len`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if fan_out() && work >= PAR_MIN_WORK && out.len() > row_len {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Like [`for_each_row`], but hands out blocks of up to `rows` rows at once;
/// `f` receives the index of the block's first row.
pub fn for_each_block<F>(out: &mut [f64], row_len: usize, rows: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 || rows == 0 {
        return;
    }
    let chunk = row_len * rows;
    #[cfg(feature = "parallel")]
    if fan_out() && work >= PAR_MIN_WORK && out.len() > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, block)| f(i * rows, block));
        return;
    }
    let _ = work;
    for (i, block) in out.chunks_mut(chunk).enumerate() {
        f(i * rows, block);
    }
}

/// Order-preserving map over independent work items.
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if fan_out() {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    items.into_iter().map(f).collect()
}
