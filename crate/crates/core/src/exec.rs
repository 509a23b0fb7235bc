//! Data-parallel execution of independent work items.
//!
//! Restarts, rollouts and sweep cells are embarrassingly parallel. With the
//! `parallel` feature they fan out over rayon; without it, or when
//! [`Execution::Sequential`] is requested, they run in index order on the
//! calling thread. Results are always returned in index order, so both paths
//! produce identical output.

use serde::{Deserialize, Serialize};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "LYOCERT_THREADS";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when work will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(0..count)` and collects the results in index order.
pub fn map_indexed<T, F>(count: usize, mode: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..count).map(f).collect()
}

/// Configures the global worker pool from `LYOCERT_THREADS`, if set.
///
/// Returns the thread cap that was applied. Calling this after the pool has
/// been initialised is harmless; the existing pool is kept.
pub fn init_thread_pool_from_env() -> Option<usize> {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)?;
    #[cfg(feature = "parallel")]
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cap)
            .build_global()
        {
            log::debug!("thread pool already initialised: {e}");
        }
    }
    Some(cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let seq = map_indexed(100, Execution::Sequential, |i| i * i);
        let par = map_indexed(100, Execution::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
