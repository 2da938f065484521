//! Pluggable, runtime-reconfigurable load generator for key-value stores.

pub mod config;
pub mod metrics;
pub mod plugins;
pub mod workload;
pub mod engine;
pub mod control;
pub mod autotune;
