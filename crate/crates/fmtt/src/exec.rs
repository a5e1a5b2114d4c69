//! Worker pool for particle propagation.

use fmtt_core::smc::Executor;
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

/// Environment variable capping the number of worker threads.
pub const THREADS_VAR: &str = "FMTT_THREADS";

pub struct Pool {
    pool: ThreadPool,
}

impl Pool {
    pub fn new(threads: usize) -> anyhow::Result<Self> {
        let pool = ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
        Ok(Self { pool })
    }

    /// All cores, or fewer if `FMTT_THREADS` says so.
    pub fn from_env() -> anyhow::Result<Self> {
        let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let threads = match std::env::var(THREADS_VAR) {
            Ok(v) => {
                let cap: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("{THREADS_VAR} must be a positive integer, got {v:?}"))?;
                if cap == 0 {
                    anyhow::bail!("{THREADS_VAR} must be positive");
                }
                cap.min(available)
            }
            Err(_) => available,
        };
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Pool {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
