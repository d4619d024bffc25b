//! Deterministic simulation of a multi-instance BFT ordering protocol with
//! object-partitioned instances, plus a global-order baseline.

pub mod checkpoint;
pub mod deadlock;
pub mod error;
pub mod exec;
pub mod harness;
pub mod iss;
pub mod model;
pub mod orderer;
pub mod partitioner;
pub mod replica;
pub mod sb;
pub mod simnet;

pub use error::{HydraError, Result};
