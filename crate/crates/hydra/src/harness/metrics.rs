//! Per-request timelines and the run report.

use std::collections::BTreeMap;

use crate::harness::config::Mode;
use crate::simnet::{to_ms, SimTime};

/// Client-observed timestamps (µs). `proposed` onwards come from the reply
/// that completed the f+1 quorum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TxTimeline {
    pub submitted: SimTime,
    pub proposed: SimTime,
    pub delivered: SimTime,
    pub exec_start: SimTime,
    pub executed: SimTime,
    pub replied: SimTime,
}

impl TxTimeline {
    pub fn is_monotone(&self) -> bool {
        self.submitted <= self.proposed
            && self.proposed <= self.delivered
            && self.delivered <= self.exec_start
            && self.exec_start <= self.executed
            && self.executed <= self.replied
    }

    pub fn latency(&self) -> SimTime {
        self.replied - self.submitted
    }

    /// (transmission, consensus, ordering, execution) in µs; sums to the
    /// end-to-end latency. In hydra mode confirmation and lock waits count
    /// as execution and ordering is zero.
    pub fn breakdown(&self, mode: Mode) -> [SimTime; 4] {
        let transmission = (self.proposed - self.submitted) + (self.replied - self.executed);
        let consensus = self.delivered - self.proposed;
        match mode {
            Mode::Hydra => [transmission, consensus, 0, self.executed - self.delivered],
            Mode::Iss => [
                transmission,
                consensus,
                self.exec_start - self.delivered,
                self.executed - self.exec_start,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxOutcome {
    pub index: usize,
    pub success: bool,
    pub attempts: u32,
    pub timeline: TxTimeline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondStat {
    pub second: u64,
    pub completed: u64,
    pub throughput_tps: f64,
    pub mean_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config_hash: String,
    pub mode: Mode,
    pub throughput_tps: f64,
    pub mean_latency_ms: f64,
    pub transmission_ms: f64,
    pub consensus_ms: f64,
    pub ordering_ms: f64,
    pub execution_ms: f64,
    pub aborts: u64,
    pub deadlocks: u64,
    pub replied_success: u64,
    pub replied_failure: u64,
    pub submitted: u64,
    pub duration_ms: f64,
    pub timeseries: Vec<SecondStat>,
}

impl RunReport {
    pub fn breakdown_sum_ms(&self) -> f64 {
        self.transmission_ms + self.consensus_ms + self.ordering_ms + self.execution_ms
    }
}

/// Completions per second inside `[from, to)`.
pub fn throughput_between(outcomes: &[TxOutcome], from: SimTime, to: SimTime) -> f64 {
    if to <= from {
        return 0.0;
    }
    let n = outcomes
        .iter()
        .filter(|o| (from..to).contains(&o.timeline.replied))
        .count();
    n as f64 / ((to - from) as f64 / 1e6)
}

pub struct ReportInputs<'a> {
    pub config_hash: String,
    pub mode: Mode,
    pub outcomes: &'a [TxOutcome],
    pub submitted: u64,
    pub aborts: u64,
    pub deadlocks: u64,
    pub end: SimTime,
}

pub fn summarize(inp: ReportInputs<'_>) -> RunReport {
    let outs = inp.outcomes;
    let count = outs.len().max(1) as f64;
    let mut parts = [0f64; 4];
    let mut total = 0f64;
    for o in outs {
        total += o.timeline.latency() as f64;
        for (acc, v) in parts.iter_mut().zip(o.timeline.breakdown(inp.mode)) {
            *acc += v as f64;
        }
    }
    let mean = |v: f64| to_ms((v / count).round() as SimTime);
    // Steady window: drop the first and last tenth of the run.
    let lo = inp.end / 10;
    let hi = inp.end - inp.end / 10;
    let mut per_sec: BTreeMap<u64, (u64, SimTime)> = BTreeMap::new();
    for o in outs {
        let e = per_sec.entry(o.timeline.replied / 1_000_000).or_default();
        e.0 += 1;
        e.1 += o.timeline.latency();
    }
    let last = inp.end / 1_000_000;
    let timeseries = (0..=last)
        .map(|s| {
            let (c, lat) = per_sec.get(&s).copied().unwrap_or_default();
            SecondStat {
                second: s,
                completed: c,
                throughput_tps: c as f64,
                mean_latency_ms: if c == 0 { 0.0 } else { lat as f64 / c as f64 / 1000.0 },
            }
        })
        .collect();
    RunReport {
        config_hash: inp.config_hash,
        mode: inp.mode,
        throughput_tps: throughput_between(outs, lo, hi),
        mean_latency_ms: if outs.is_empty() { 0.0 } else { total / count / 1000.0 },
        transmission_ms: mean(parts[0]),
        consensus_ms: mean(parts[1]),
        ordering_ms: mean(parts[2]),
        execution_ms: mean(parts[3]),
        aborts: inp.aborts,
        deadlocks: inp.deadlocks,
        replied_success: outs.iter().filter(|o| o.success).count() as u64,
        replied_failure: outs.iter().filter(|o| !o.success).count() as u64,
        submitted: inp.submitted,
        duration_ms: to_ms(inp.end),
        timeseries,
    }
}
