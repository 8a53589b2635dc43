//! Execution helpers for the data-parallel inner loops.
//!
//! Residual and force assembly are pure per-node/per-cell computations, so
//! they can run on rayon when the `parallel` feature is enabled. The
//! sequential path is always available and is used as the fallback when the
//! feature is off.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How an assembly loop should be executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon work-stealing loop. Falls back to sequential when the crate is
    /// built without the `parallel` feature.
    Parallel,
}

impl Default for ExecMode {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecMode::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecMode::Sequential
    }
}

/// Maps `f` over `0..len` and collects the results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..len).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..len).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..len).map(f).collect()
            }
        }
    }
}

/// Same loop with the crate-default mode.
pub fn map_default<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed(ExecMode::default(), len, f)
}
