//! Per-market work distribution with a fixed combination order.
//!
//! Every parallel computation in the crate goes through [`Executor::map_markets`]:
//! each market is evaluated by the same sequential code no matter which worker
//! runs it, and the per-market results come back in market order. Callers then
//! fold them sequentially, so results are bit-identical for any thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{BlpError, Result};

#[derive(Clone)]
pub struct Executor {
    threads: usize,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("threads", &self.threads)
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            threads: 1,
            pool: None,
        }
    }

    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(BlpError::InvalidInput("thread count must be at least 1".into()));
        }
        if threads == 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| BlpError::InvalidInput(format!("cannot build thread pool: {e}")))?;
        Ok(Self {
            threads,
            pool: Some(Arc::new(pool)),
        })
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Evaluates `f` for every market and returns the results in market order.
    pub fn map_markets<R, F>(&self, markets: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match &self.pool {
            None => (0..markets).map(f).collect(),
            Some(pool) => pool.install(|| (0..markets).into_par_iter().map(&f).collect()),
        }
    }

    /// Like [`map_markets`](Self::map_markets) for fallible work; the error
    /// reported is the one from the lowest-indexed failing market.
    pub fn try_map_markets<R, F>(&self, markets: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map_markets(markets, f).into_iter().collect()
    }
}

/// Default thread count: available hardware parallelism capped at 8.
pub fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
}
