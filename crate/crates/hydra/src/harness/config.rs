//! Scenario configuration (TOML).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HydraError, Result};
use crate::model::sha256;
use crate::simnet::FaultSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Hydra,
    Iss,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Hydra => "hydra",
            Mode::Iss => "iss",
        })
    }
}

impl FromStr for Mode {
    type Err = HydraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hydra" => Ok(Mode::Hydra),
            "iss" => Ok(Mode::Iss),
            other => Err(HydraError::config("mode", format!("expected hydra or iss, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_delay_ms: f64,
    pub jitter_ms: f64,
    pub delta_ms: f64,
    pub gst_ms: f64,
    /// Extra delay bound for messages sent before GST.
    pub pre_gst_extra_ms: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_delay_ms: 1.0,
            jitter_ms: 0.2,
            delta_ms: 500.0,
            gst_ms: 0.0,
            pre_gst_extra_ms: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub batch_size: usize,
    pub batch_timeout_ms: f64,
    /// Defaults to 4 * delta when absent.
    pub view_timeout_ms: Option<f64>,
    pub epoch_len: u64,
    pub abort_grace: u64,
    /// Leaders keep cutting (possibly empty) blocks until this many epochs
    /// have completed.
    pub min_epochs: u64,
    /// Replace PBFT with simulator-ordained delivery.
    pub ideal_sb: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            batch_size: 4096,
            batch_timeout_ms: 10.0,
            view_timeout_ms: None,
            epoch_len: 16,
            abort_grace: 1,
            min_epochs: 0,
            ideal_sb: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutionConfig {
    pub slots: usize,
    pub vertex_cost_ms: f64,
    pub proc_msg_ms: f64,
    pub proc_tx_ms: f64,
    pub initial_balance: i64,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig {
            slots: 8,
            vertex_cost_ms: 1.0,
            proc_msg_ms: 0.01,
            proc_tx_ms: 0.01,
            initial_balance: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub tx_count: usize,
    pub cross_ratio: f64,
    pub objects_per_tx: usize,
    pub object_universe: usize,
    pub payload_bytes: u32,
    /// Open-loop submission rate (tx/s).
    pub client_rate: f64,
    /// Closed-loop window; 0 means open loop.
    pub max_inflight: usize,
    pub amount: i64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            tx_count: 1000,
            cross_ratio: 0.1,
            objects_per_tx: 2,
            object_universe: 1000,
            payload_bytes: 500,
            client_rate: 1000.0,
            max_inflight: 0,
            amount: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKindConfig {
    Straggler,
    Crash,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub kind: FaultKindConfig,
    pub target: u32,
    #[serde(default = "one")]
    pub factor: f64,
    #[serde(default)]
    pub at_ms: f64,
}

fn one() -> f64 {
    1.0
}

impl FaultConfig {
    pub fn spec(&self) -> FaultSpec {
        match self.kind {
            FaultKindConfig::Straggler => FaultSpec::straggler(self.target, self.factor),
            FaultKindConfig::Crash => FaultSpec::crash(self.target, self.at_ms),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub seed: u64,
    pub n: u32,
    /// Instance count; defaults to n.
    pub m: Option<u32>,
    /// Hard stop for the simulation.
    pub max_time_ms: f64,
    /// Keep per-replica commit history for the serializability oracle.
    pub record_history: bool,
    pub network: NetworkConfig,
    pub protocol: ProtocolConfig,
    pub execution: ExecutionConfig,
    pub workload: WorkloadConfig,
    pub faults: Vec<FaultConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            mode: Mode::Hydra,
            seed: 1,
            n: 4,
            m: None,
            max_time_ms: 120_000.0,
            record_history: false,
            network: NetworkConfig::default(),
            protocol: ProtocolConfig::default(),
            execution: ExecutionConfig::default(),
            workload: WorkloadConfig::default(),
            faults: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn f(&self) -> u32 {
        (self.n - 1) / 3
    }

    pub fn m(&self) -> u32 {
        self.m.unwrap_or(self.n)
    }

    pub fn view_timeout_ms(&self) -> f64 {
        self.protocol.view_timeout_ms.unwrap_or(4.0 * self.network.delta_ms)
    }

    pub fn from_toml_str(src: &str, path: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(src).map_err(|e| HydraError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            HydraError::Config { field, msg } => {
                let line = locate(src, &field).map(|l| format!("line {l}: ")).unwrap_or_default();
                HydraError::Parse {
                    path: path.to_path_buf(),
                    msg: format!("{line}field `{field}`: {msg}"),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|source| HydraError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&src, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Short stable hash of the canonical serialisation.
    pub fn config_hash(&self) -> String {
        let d = sha256(self.to_toml().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let err = HydraError::config;
        if self.seed > i64::MAX as u64 {
            return Err(err("seed", "must fit a TOML integer (at most 2^63 - 1)"));
        }
        if self.n < 4 {
            return Err(err("n", "must be at least 4 (f >= 1)"));
        }
        if self.m() == 0 {
            return Err(err("m", "must be at least 1"));
        }
        if self.max_time_ms <= 0.0 {
            return Err(err("max_time_ms", "must be positive"));
        }
        let net = &self.network;
        for (name, v) in [
            ("network.base_delay_ms", net.base_delay_ms),
            ("network.jitter_ms", net.jitter_ms),
            ("network.gst_ms", net.gst_ms),
            ("network.pre_gst_extra_ms", net.pre_gst_extra_ms),
        ] {
            if !(v >= 0.0) {
                return Err(err(name, "must be non-negative"));
            }
        }
        if !(net.delta_ms > 0.0) || net.delta_ms < net.base_delay_ms {
            return Err(err("network.delta_ms", "must be positive and at least base_delay_ms"));
        }
        let p = &self.protocol;
        if p.batch_size == 0 {
            return Err(err("protocol.batch_size", "must be at least 1"));
        }
        if !(p.batch_timeout_ms > 0.0) {
            return Err(err("protocol.batch_timeout_ms", "must be positive"));
        }
        if !(self.view_timeout_ms() > 0.0) {
            return Err(err("protocol.view_timeout_ms", "must be positive"));
        }
        if p.epoch_len == 0 {
            return Err(err("protocol.epoch_len", "must be at least 1"));
        }
        let x = &self.execution;
        if x.slots == 0 {
            return Err(err("execution.slots", "must be at least 1"));
        }
        for (name, v) in [
            ("execution.vertex_cost_ms", x.vertex_cost_ms),
            ("execution.proc_msg_ms", x.proc_msg_ms),
            ("execution.proc_tx_ms", x.proc_tx_ms),
        ] {
            if !(v >= 0.0) {
                return Err(err(name, "must be non-negative"));
            }
        }
        let w = &self.workload;
        if !(0.0..=1.0).contains(&w.cross_ratio) {
            return Err(err("workload.cross_ratio", "must lie in [0, 1]"));
        }
        if w.objects_per_tx == 0 {
            return Err(err("workload.objects_per_tx", "must be at least 1"));
        }
        if w.object_universe < 2 * w.objects_per_tx {
            return Err(err("workload.object_universe", "must be at least 2 * objects_per_tx"));
        }
        if w.max_inflight == 0 && !(w.client_rate > 0.0) {
            return Err(err("workload.client_rate", "must be positive for open-loop clients"));
        }
        if w.amount <= 0 {
            return Err(err("workload.amount", "must be positive"));
        }
        for fc in &self.faults {
            if fc.target >= self.n {
                return Err(err("faults.target", &format!("replica {} does not exist", fc.target)));
            }
            if fc.kind == FaultKindConfig::Straggler && !(fc.factor >= 1.0) {
                return Err(err("faults.factor", "straggler factor must be >= 1"));
            }
            if !(fc.at_ms >= 0.0) {
                return Err(err("faults.at_ms", "must be non-negative"));
            }
        }
        let crashes: std::collections::BTreeSet<_> = self
            .faults
            .iter()
            .filter(|f| f.kind == FaultKindConfig::Crash)
            .map(|f| f.target)
            .collect();
        if crashes.len() > self.f() as usize {
            return Err(HydraError::TooManyFaults {
                requested: crashes.len(),
                f: self.f() as usize,
            });
        }
        Ok(())
    }
}

/// 1-based line of `section.key` (or a top-level key) in TOML source.
fn locate(src: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.rsplit_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, field),
    };
    let mut current: Option<String> = None;
    for (idx, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = Some(line.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        if k.trim() != key {
            continue;
        }
        if current.as_deref() == section {
            return Some(idx + 1);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut c = ScenarioConfig::default();
        c.faults.push(FaultConfig {
            kind: FaultKindConfig::Straggler,
            target: 1,
            factor: 10.0,
            at_ms: 0.0,
        });
        let back = ScenarioConfig::from_toml_str(&c.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn validation_reports_line() {
        let src = "n = 4\n\n[workload]\ntx_count = 5\ncross_ratio = 1.5\n";
        let e = ScenarioConfig::from_toml_str(src, Path::new("s.toml")).unwrap_err().to_string();
        assert!(e.contains("line 5"), "{e}");
        assert!(e.contains("workload.cross_ratio"), "{e}");
    }

    #[test]
    fn unknown_field_rejected() {
        let e = ScenarioConfig::from_toml_str("n = 4\nbogus = 1\n", Path::new("s.toml"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("bogus"), "{e}");
        assert!(e.contains("line 2"), "{e}");
    }
}
