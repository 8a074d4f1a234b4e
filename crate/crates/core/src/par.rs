//! Ordered data-parallel map with a sequential fallback.
//!
//! Results are always returned in index order, and every caller reduces them
//! sequentially afterwards, so the thread count never changes a numeric result.

/// How independent jobs (episodes, batch elements, sweep cells) are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon work stealing. Falls back to sequential when the crate is built
    /// without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    /// `DEFLECT_THREADS=1` selects sequential execution; anything else parallel.
    pub fn from_env() -> Self {
        match thread_cap_from_env() {
            Some(1) => Execution::Sequential,
            _ => Execution::Parallel,
        }
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            Execution::Parallel => parallel_map(n, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Positive integer from `DEFLECT_THREADS`, if set.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var("DEFLECT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
}

/// Caps the global rayon pool at `DEFLECT_THREADS`. Safe to call repeatedly;
/// only the first call before any parallel work has an effect.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    if let Some(n) = thread_cap_from_env() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
