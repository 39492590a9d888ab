//! Execution strategy for the data-parallel loops (Monte Carlo blocks,
//! batches of test functions, parameter sweeps).
//!
//! Every parallel map collects results in index order, so the strategy never
//! changes the numbers that come out.

use std::sync::Once;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "HIDA_LAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    Sequential,
    #[default]
    Parallel,
}

impl Strategy {
    /// `Parallel` when the `parallel` feature is compiled in.
    pub fn available(self) -> Strategy {
        if cfg!(feature = "parallel") {
            self
        } else {
            Strategy::Sequential
        }
    }
}

/// Maps `f` over `0..len`, returning results in index order.
pub fn map_indexed<T, F>(strategy: Strategy, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match strategy.available() {
        Strategy::Sequential => (0..len).map(f).collect(),
        #[cfg(feature = "parallel")]
        Strategy::Parallel => {
            use rayon::prelude::*;
            (0..len).into_par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        Strategy::Parallel => unreachable!(),
    }
}

/// Maps `f` over a slice, returning results in order.
pub fn map_slice<S, T, F>(strategy: Strategy, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(strategy, items.len(), |i| f(&items[i]))
}

/// Reads `HIDA_LAB_THREADS` and sizes the global worker pool. Safe to call
/// repeatedly; only the first call has an effect.
pub fn configure_threads_from_env() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        else {
            return;
        };
        #[cfg(feature = "parallel")]
        {
            // fails only if the global pool was already built
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        #[cfg(not(feature = "parallel"))]
        let _ = n;
    });
}
