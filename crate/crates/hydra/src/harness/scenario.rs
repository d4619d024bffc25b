//! Runs one scenario end to end, plus grid sweeps and trace replay.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::Result;
use crate::harness::client::Client;
use crate::harness::config::{FaultConfig, FaultKindConfig, Mode, ScenarioConfig};
use crate::harness::metrics::{summarize, ReportInputs, RunReport, TxOutcome};
use crate::harness::workload::generate_workload;
use crate::model::{Block, EpochId, Keyring, ObjectKey, TransactionDag};
use crate::partitioner::assign;
use crate::replica::{
    iss_bucket, Committed, EpochSnapshot, Msg, Net, Replica, ReplicaParams, ReplicaStats,
};
use crate::simnet::{ms, Delivery, LinkModel, SimTime, TraceRecord};

/// End-of-run view of one replica.
#[derive(Clone, Debug)]
pub struct ReplicaSummary {
    pub id: u32,
    pub crashed: bool,
    pub snapshots: BTreeMap<EpochId, EpochSnapshot>,
    pub stable: BTreeMap<EpochId, [u8; 32]>,
    pub retained_after_gc: BTreeMap<EpochId, usize>,
    pub history: Vec<Committed>,
    pub store: BTreeMap<ObjectKey, i64>,
    pub store_digest: [u8; 32],
    pub frontier: Vec<i64>,
    pub stats: ReplicaStats,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub report: RunReport,
    pub replicas: Vec<ReplicaSummary>,
    pub outcomes: Vec<TxOutcome>,
    pub workload: Vec<Arc<TransactionDag>>,
    /// `epoch_clock[e]`: first time any replica delivered into epoch `e`.
    pub epoch_clock: Vec<SimTime>,
    pub fingerprint: u64,
    pub trace: Vec<TraceRecord>,
    pub end: SimTime,
}

impl RunResult {
    pub fn honest(&self) -> impl Iterator<Item = &ReplicaSummary> {
        self.replicas.iter().filter(|r| !r.crashed)
    }

    /// Epoch index in force at time `t` under the epoch clock.
    pub fn epoch_at(&self, t: SimTime) -> usize {
        self.epoch_clock.partition_point(|&s| s <= t)
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunResult> {
    run(cfg, false)
}

pub fn run_traced(cfg: &ScenarioConfig) -> Result<RunResult> {
    run(cfg, true)
}

fn run(cfg: &ScenarioConfig, trace: bool) -> Result<RunResult> {
    cfg.validate()?;
    let keys = Keyring::new(cfg.seed);
    let p = ReplicaParams::from_config(cfg);
    let txs = generate_workload(&cfg.workload, p.m, cfg.seed, &keys)?;
    let net_cfg = &cfg.network;
    let mut link = LinkModel::uniform(
        cfg.n as usize + 1,
        ms(net_cfg.base_delay_ms),
        ms(net_cfg.jitter_ms),
        ms(net_cfg.delta_ms),
    );
    link.gst = ms(net_cfg.gst_ms);
    link.pre_gst_extra = ms(net_cfg.pre_gst_extra_ms);
    let mut net = Net::new(link, cfg.seed, p.f as usize);
    if trace {
        net.enable_trace();
    }
    for fc in &cfg.faults {
        net.inject_fault(fc.spec())?;
    }
    let mut replicas: Vec<Replica> = (0..cfg.n).map(|r| Replica::new(r, p.clone(), keys.clone())).collect();
    let mut client = Client::new(&p, txs.clone(), cfg.workload.client_rate, cfg.workload.max_inflight);
    client.start(&mut net);

    let client_node = p.client;
    let min_epochs = p.min_epochs;
    let mut epoch_clock: Vec<SimTime> = Vec::new();
    let done = Cell::new(false);
    net.run_while(
        ms(cfg.max_time_ms),
        |net, d| {
            let node = match d {
                Delivery::Message { from, to, msg } => {
                    if to == client_node {
                        if let Msg::Reply(r) = msg {
                            client.on_reply(net, r);
                        }
                    } else {
                        replicas[to as usize].on_message(net, from, msg);
                    }
                    to
                }
                Delivery::Timer { node, timer } => {
                    if node == client_node {
                        client.on_timer(net);
                    } else {
                        replicas[node as usize].on_timer(net, timer);
                    }
                    node
                }
            };
            if node != client_node {
                if let Some(e) = replicas[node as usize].max_epoch() {
                    while epoch_clock.len() <= e as usize {
                        epoch_clock.push(net.now());
                    }
                }
            }
            if client.finished() {
                let settled = replicas
                    .iter()
                    .filter(|r| !net.is_crashed(r.id))
                    .all(|r| r.collected_epochs() >= min_epochs);
                done.set(settled);
            }
        },
        |_| done.get(),
    );

    let end = net.now();
    let outcomes = client.outcomes();
    let crashed: Vec<bool> = (0..cfg.n).map(|r| net.is_crashed(r)).collect();
    let reporter = replicas
        .iter()
        .find(|r| !crashed[r.id as usize])
        .expect("at most f replicas crash");
    let report = summarize(ReportInputs {
        config_hash: cfg.config_hash(),
        mode: cfg.mode,
        outcomes: &outcomes,
        submitted: client.submitted() as u64,
        aborts: reporter.stats.unconfirmed_aborts + reporter.stats.victim_aborts,
        deadlocks: reporter.stats.deadlocks,
        end,
    });
    let fingerprint = net.fingerprint();
    let trace = net.take_trace();
    let replicas = replicas
        .into_iter()
        .map(|r| ReplicaSummary {
            id: r.id,
            crashed: crashed[r.id as usize],
            snapshots: r.snapshots.clone(),
            stable: r.stable.clone(),
            retained_after_gc: r.retained_after_gc.clone(),
            store: r.store_values().clone(),
            store_digest: r.store_digest(),
            frontier: r.frontier().to_vec(),
            stats: r.stats.clone(),
            history: r.history,
        })
        .collect();
    Ok(RunResult {
        report,
        replicas,
        outcomes,
        workload: txs,
        epoch_clock,
        fingerprint,
        trace,
        end,
    })
}

/// Execution makespan of one replica fed every transaction at time zero:
/// first execution start to last completion. Blocks arrive through the
/// ideal-delivery path, one per instance.
pub fn execution_makespan(
    mode: Mode,
    m: u32,
    slots: usize,
    vertex_cost_ms: f64,
    txs: &[Arc<TransactionDag>],
) -> Result<SimTime> {
    let mut cfg = ScenarioConfig {
        mode,
        m: Some(m),
        record_history: true,
        ..Default::default()
    };
    cfg.protocol.ideal_sb = true;
    cfg.execution.slots = slots;
    cfg.execution.vertex_cost_ms = vertex_cost_ms;
    cfg.validate()?;
    let keys = Keyring::new(cfg.seed);
    let p = ReplicaParams::from_config(&cfg);
    let mut net = Net::new(LinkModel::uniform(p.n as usize + 1, 1000, 0, 1000), cfg.seed, 1);
    let mut replica = Replica::new(0, p.clone(), keys.clone());
    let mut per: Vec<Vec<Arc<TransactionDag>>> = vec![Vec::new(); m as usize];
    for tx in txs {
        let i = match mode {
            Mode::Iss => iss_bucket(&tx.id, m),
            Mode::Hydra => assign(tx.objects().next().expect("non-empty tx"), m),
        };
        per[i as usize].push(tx.clone());
    }
    for (i, batch) in per.into_iter().enumerate() {
        let leader = i as u32 % p.n;
        let block = Block {
            txs: batch,
            attest: vec![-1; m as usize],
            ..Block::empty(i as u32, 0)
        }
        .sign(&keys, leader);
        replica.on_message(&mut net, leader, Msg::Ideal(Arc::new(block)));
    }
    net.run_until(SimTime::MAX / 2, |net, d| match d {
        Delivery::Timer { node: 0, timer } => replica.on_timer(net, timer),
        Delivery::Message { to: 0, from, msg } => replica.on_message(net, from, msg),
        _ => {}
    });
    let start = replica.history.iter().map(|c| c.started).min().unwrap_or(0);
    let end = replica.history.iter().map(|c| c.finished).max().unwrap_or(0);
    Ok(end - start)
}

/// Cartesian grid over cross ratio, straggler factor (1 = none) and n.
pub fn sweep_grid(base: &ScenarioConfig, ratios: &[f64], stragglers: &[f64], ns: &[u32]) -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for &n in ns {
        for &s in stragglers {
            for &r in ratios {
                let mut c = base.clone();
                c.n = n;
                c.m = None;
                c.workload.cross_ratio = r;
                c.faults.retain(|f| f.kind != FaultKindConfig::Straggler);
                if s > 1.0 {
                    c.faults.push(FaultConfig {
                        kind: FaultKindConfig::Straggler,
                        target: 0,
                        factor: s,
                        at_ms: 0.0,
                    });
                }
                out.push(c);
            }
        }
    }
    out
}

pub fn sweep_sequential(configs: &[ScenarioConfig]) -> Vec<Result<RunReport>> {
    configs.iter().map(|c| run_scenario(c).map(|r| r.report)).collect()
}

#[cfg(feature = "parallel")]
pub fn sweep_parallel(configs: &[ScenarioConfig]) -> Vec<Result<RunReport>> {
    use rayon::prelude::*;
    configs.par_iter().map(|c| run_scenario(c).map(|r| r.report)).collect()
}

/// Runs independent scenarios, in parallel when the feature is enabled.
/// Results come back in input order either way.
pub fn sweep(configs: &[ScenarioConfig]) -> Vec<Result<RunReport>> {
    #[cfg(feature = "parallel")]
    {
        sweep_parallel(configs)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sweep_sequential(configs)
    }
}

/// Like [`sweep`] but keeps the full per-replica results.
pub fn run_batch(configs: &[ScenarioConfig]) -> Vec<Result<RunResult>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        configs.par_iter().map(run_scenario).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        configs.iter().map(run_scenario).collect()
    }
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\n", r.at, r.seqno, r.line));
    }
    s
}

/// First line where a recorded trace and a fresh run disagree.
pub fn first_divergence(expected: &str, actual: &[TraceRecord]) -> Option<(usize, String, String)> {
    let fresh = format_trace(actual);
    let mut a = expected.lines();
    let mut b = fresh.lines();
    let mut idx = 0;
    loop {
        match (a.next(), b.next()) {
            (None, None) => return None,
            (x, y) if x == y => idx += 1,
            (x, y) => {
                return Some((
                    idx + 1,
                    x.unwrap_or("<end>").to_string(),
                    y.unwrap_or("<end>").to_string(),
                ))
            }
        }
    }
}
