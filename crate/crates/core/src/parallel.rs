//! Ordered data-parallel map with a sequential fallback.
//!
//! Results are always returned in input order and reductions are performed
//! by the caller in that order, so outputs do not depend on thread count.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parallelism {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// behaves like `Sequential`.
    #[default]
    Rayon,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

pub fn map_ordered<I, O, F>(items: &[I], mode: Parallelism, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == Parallelism::Rayon {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Configures the global rayon pool. Only the first call has an effect.
pub fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
