//! Chunked evaluation with a switchable rayon backend.
//!
//! Work is split into fixed-size chunks and the per-chunk results are returned
//! in chunk order, so reductions over them are identical in both modes.

use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// Whether the parallel backend is compiled in.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Default chunk length for node loops. Fixed so results never depend on the
/// thread count.
pub const DEFAULT_CHUNK: usize = 512;

fn chunk_ranges(len: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(len))
        .collect()
}

/// Applies `f(chunk_index, range)` to every chunk of `0..len`, returning the
/// results in chunk order.
pub fn map_chunks<T, F>(mode: ExecMode, len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(len, chunk);
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            ranges
                .into_par_iter()
                .enumerate()
                .map(|(i, r)| f(i, r))
                .collect()
        }
        _ => ranges.into_iter().enumerate().map(|(i, r)| f(i, r)).collect(),
    }
}

/// Element-wise map preserving order.
pub fn map_items<T, F>(mode: ExecMode, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_chunks(mode, len, 64, |_, r| r.map(&f).collect::<Vec<_>>())
        .into_iter()
        .flatten()
        .collect()
}
