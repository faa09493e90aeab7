//! Execution strategy: rayon data-parallel map with a sequential
//! fallback.
//!
//! The experiment harness fans out over splits. With the `parallel`
//! feature (default) enabled, [`ExecMode::Parallel`] runs the map on the
//! current rayon pool; without it, or under [`ExecMode::Sequential`],
//! the same closure runs on one thread. Results are returned in input
//! order either way, and every closure derives its randomness from a
//! per-item counter seed, so the two modes produce byte-identical
//! output.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to evaluate an embarrassingly parallel batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Single-threaded loop; always available.
    Sequential,
    /// Rayon pool when compiled with the `parallel` feature; degrades
    /// to the sequential loop otherwise.
    Parallel,
}

impl ExecMode {
    /// Resolve from the `CONFORMAL_AUDIT_THREADS` environment variable:
    /// unset or 0 means parallel on all cores, 1 means sequential, and
    /// k > 1 means parallel (pool sizing is the caller's concern).
    pub fn from_env() -> Self {
        match std::env::var("CONFORMAL_AUDIT_THREADS") {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(1) => ExecMode::Sequential,
                _ => ExecMode::Parallel,
            },
            Err(_) => ExecMode::Parallel,
        }
    }
}

/// Map `f` over `items`, preserving order.
pub fn map_collect<T, R, F>(mode: ExecMode, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.into_iter().map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items.into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.into_iter().map(f).collect()
            }
        }
    }
}

/// Fallible variant of [`map_collect`]; stops at the first error in
/// input order.
pub fn try_map_collect<T, R, F>(mode: ExecMode, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.into_iter().map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items.into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.into_iter().map(f).collect()
            }
        }
    }
}
