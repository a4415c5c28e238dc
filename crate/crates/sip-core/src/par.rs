//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the parallel paths run on rayon;
//! without it they degrade to plain iteration. Both paths produce
//! bit-identical results: work is split per output element or per sample,
//! and every reduction keeps its fixed left-to-right order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for batch-level work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon work-stealing when the `parallel` feature is enabled,
    /// otherwise identical to `Sequential`.
    Parallel,
}

impl ExecMode {
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Map `f` over indexed items, preserving input order in the output.
pub fn map_indexed<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        ExecMode::Parallel => map_parallel(items, f),
    }
}

#[cfg(feature = "parallel")]
fn map_parallel<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_parallel<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Run `f` for each row index in `0..rows`, writing into disjoint
/// `row_len`-sized chunks of `out`. Each chunk is computed by exactly one
/// task, so thread count never changes the result.
pub fn for_each_row<R, F>(out: &mut [R], row_len: usize, f: F)
where
    R: Send,
    F: Fn(usize, &mut [R]) + Sync + Send,
{
    debug_assert!(row_len > 0 && out.len().is_multiple_of(row_len));
    for_each_block(out, row_len, f)
}

/// Split `out` into `block_len`-sized chunks (the last may be shorter) and
/// run `f(block_index, chunk)` for each, in parallel when worthwhile.
pub fn for_each_block<R, F>(out: &mut [R], block_len: usize, f: F)
where
    R: Send,
    F: Fn(usize, &mut [R]) + Sync + Send,
{
    debug_assert!(block_len > 0);
    #[cfg(feature = "parallel")]
    {
        // Chunk splitting costs more than it saves on small outputs.
        if out.len() >= 16 * 1024 && out.len() > block_len {
            out.par_chunks_mut(block_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    for (i, chunk) in out.chunks_mut(block_len).enumerate() {
        f(i, chunk);
    }
}
