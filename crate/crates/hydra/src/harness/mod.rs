//! Scenario loading, workload generation, metrics and reports.

pub mod client;
pub mod config;
pub mod metrics;
pub mod report;
pub mod scenario;
pub mod workload;
