//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default), work is spread over rayon while
//! preserving input order, so results are bit-identical to the sequential
//! fallback. Building with `--no-default-features` removes the rayon
//! dependency entirely and every call runs sequentially.

/// Execution strategy for the data-parallel loops (client training, the
/// N x N evaluation grid, multi-seed check suites).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
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

/// Order-preserving map. Results land at the same index as their input
/// regardless of execution mode, which is what keeps runs deterministic.
pub fn map_indexed<T, R, F>(mode: ExecMode, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items
            .into_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items
                .into_par_iter()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect()
        }
    }
}
