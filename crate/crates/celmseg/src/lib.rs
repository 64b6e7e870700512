//! File formats, parallel execution and the command-line pipeline built on
//! top of `celmseg-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod eval;
pub mod exec;
pub mod pgm;
pub mod pipeline;
pub mod report;
pub mod sweep;
