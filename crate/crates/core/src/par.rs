//! Data-parallel helpers.
//!
//! Every batch-shaped loop in the crate (layer sweeps, per-record pipeline
//! runs, per-item gradients, grid points, finite-difference coordinates)
//! goes through [`map_indices`]. With the `parallel` feature the work is
//! spread over the rayon pool; without it, or with [`ExecMode::Sequential`],
//! the same closure runs in index order. Results always come back in index
//! order, so callers reduce them deterministically either way.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// The mode that will actually run: `Parallel` degrades to
    /// `Sequential` when the crate is built without the `parallel` feature.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

pub fn map_indices<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode.effective() {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => parallel_map(n, f),
    }
}

pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_indices(mode, items.len(), |i| f(&items[i]))
}

/// Like [`map_indices`] but stops at the first error (by index order).
pub fn try_map_indices<R, F>(mode: ExecMode, n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map_indices(mode, n, f).into_iter().collect()
}

#[cfg(feature = "parallel")]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}
