use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HydraError {
    #[error("too many crash faults: {requested} distinct targets exceed f = {f}")]
    TooManyFaults { requested: usize, f: usize },
    #[error("replica {replica} is not the leader of instance {instance}")]
    NotLeader { replica: u32, instance: u32 },
    #[error("stale sequence number: expected {expected}, got {got}")]
    StaleSn { expected: u64, got: u64 },
    #[error("authenticator check failed")]
    AuthFail,
    #[error("equivocation on instance {instance} sn {sn} view {view}")]
    Equivocation { instance: u32, sn: u64, view: u64 },
    #[error("invalid transaction")]
    InvalidTx,
    #[error("duplicate delivery of instance {instance} sn {sn}")]
    DuplicateDelivery { instance: u32, sn: u64 },
    #[error("epoch {0} is still open")]
    EpochOpen(u64),
    #[error("workload unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("transaction edges contain a cycle")]
    Cycle,
    #[error("object key must be non-empty")]
    EmptyKey,
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, HydraError>;

impl HydraError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        HydraError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
