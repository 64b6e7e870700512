//! Thread-pool and wall-clock implementations of the core execution hooks.

use std::time::Instant;

use celmseg_core::exec::{Clock, ShardRunner};
use rayon::prelude::*;

use crate::error::{AppError, AppResult};

pub struct RayonRunner {
    pool: rayon::ThreadPool,
}

impl RayonRunner {
    /// `jobs = 0` uses one thread per available core.
    pub fn new(jobs: usize) -> AppResult<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| AppError::Usage(format!("cannot start {} worker threads: {}", jobs, e)))?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

impl ShardRunner for RayonRunner {
    fn run<T, F>(&self, count: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        if self.pool.current_num_threads() == 1 {
            return (0..count).map(task).collect();
        }
        self.pool.install(|| (0..count).into_par_iter().map(task).collect())
    }
}

pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}
