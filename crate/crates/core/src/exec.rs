//! Execution hooks: data-parallel sharding and wall-clock timing.
//!
//! The core crate stays single-threaded and clock-free; callers with `std`
//! supply implementations backed by a thread pool and `Instant`.

use alloc::vec::Vec;

/// Evaluates independent, indexed tasks. Results are returned in index order,
/// so any implementation yields bit-identical reductions.
pub trait ShardRunner: Sync {
    fn run<T, F>(&self, count: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ShardRunner for Sequential {
    fn run<T, F>(&self, count: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..count).map(task).collect()
    }
}

/// Monotonic clock in seconds.
pub trait Clock: Sync {
    fn now_seconds(&self) -> f64;
}

/// A clock that never advances; timing fractions fall back to their
/// zero-duration convention.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_seconds(&self) -> f64 {
        0.0
    }
}
