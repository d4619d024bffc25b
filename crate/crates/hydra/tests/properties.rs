//! Property tests for the model, network, deadlock resolver and end-to-end
//! invariants.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use hydra::deadlock::{cut_deadlock_group, cycle_nodes, select_victims, DeadlockGroup};
use hydra::harness::config::{FaultConfig, FaultKindConfig, Mode, ScenarioConfig};
use hydra::harness::scenario::{execution_makespan, run_scenario};
use hydra::harness::workload::generate_workload;
use hydra::model::{
    toposort, tx_digest, validate_tx, Block, InstanceId, Keyring, ObjectKey, Op, Party, TransactionDag, TxDigest,
    VertexSpec,
};
use hydra::orderer::{Orderer, OrdererConfig};
use hydra::partitioner::{assign, instances_of, Partitioner};
use hydra::simnet::{ms, Delivery, LinkModel, SimNet, SimTime, TraceLabel};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(keys: &Keyring, nonce: u64, objs: &[String], edges: Vec<(u32, u32)>) -> TransactionDag {
    let specs = objs.iter().map(|o| VertexSpec::new(o.as_str(), Op::Add, 1)).collect();
    TransactionDag::build(keys, Party::Client(0), nonce, specs, edges)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn toposort_respects_every_edge(n in 1usize..12, raw in proptest::collection::vec((0u32..12, 0u32..12), 0..30)) {
        // Only forward edges, so the graph is acyclic.
        let edges: Vec<(u32, u32)> = raw
            .into_iter()
            .filter(|&(a, b)| a < b && (b as usize) < n)
            .collect();
        let objs: Vec<String> = (0..n).map(|k| format!("o{k}")).collect();
        let tx = build(&Keyring::new(1), 0, &objs, edges.clone());
        let order = toposort(&tx).unwrap();
        let mut seen = order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let at: BTreeMap<usize, usize> = order.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        for (a, b) in edges {
            prop_assert!(at[&(a as usize)] < at[&(b as usize)]);
        }
    }

    #[test]
    fn validate_is_pure(nonce in any::<u64>(), n in 1usize..5) {
        let keys = Keyring::new(3);
        let objs: Vec<String> = (0..n).map(|k| format!("v{k}")).collect();
        let tx = build(&keys, nonce, &objs, vec![]);
        let first = validate_tx(&tx, &keys);
        prop_assert!(first);
        prop_assert_eq!(validate_tx(&tx, &keys), first);
        prop_assert_eq!(tx_digest(&tx), tx.id);
    }

    #[test]
    fn assign_is_total_and_stable(key in proptest::collection::vec(any::<u8>(), 1..24), m in 1u32..64) {
        let o = ObjectKey::new(key).unwrap();
        let i = assign(&o, m);
        prop_assert!(i < m);
        prop_assert_eq!(assign(&o.clone(), m), i);
    }

    #[test]
    fn routing_dedups_and_covers_instances(nonces in proptest::collection::vec(0u64..20, 1..40), m in 1u32..6) {
        let keys = Keyring::new(2);
        let mut part = Partitioner::new(m);
        let mut distinct = BTreeMap::new();
        for n in nonces {
            let objs = vec![format!("a{n}"), format!("b{n}")];
            let tx = Arc::new(build(&keys, n, &objs, vec![]));
            let routed = part.route_tx(tx.clone(), &keys).unwrap();
            prop_assert_eq!(&routed.instances, &instances_of(&tx, m));
            prop_assert_eq!(routed.added, !distinct.contains_key(&tx.id));
            distinct.insert(tx.id, routed.instances);
        }
        for i in 0..m {
            let ids = part.bucket(i).peek_ids();
            let unique: BTreeSet<_> = ids.iter().collect();
            prop_assert_eq!(unique.len(), ids.len());
            let want: BTreeSet<TxDigest> = distinct
                .iter()
                .filter(|(_, ins)| ins.contains(&i))
                .map(|(d, _)| *d)
                .collect();
            prop_assert_eq!(ids.into_iter().collect::<BTreeSet<_>>(), want);
        }
    }

    #[test]
    fn workload_cross_count_is_exact(count in 1usize..400, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let cfg = hydra::harness::config::WorkloadConfig {
            tx_count: count,
            cross_ratio: ratio,
            object_universe: 200,
            ..Default::default()
        };
        let txs = generate_workload(&cfg, 8, seed, &Keyring::new(seed)).unwrap();
        let cross = txs.iter().filter(|t| instances_of(t, 8).len() > 1).count();
        prop_assert_eq!(cross, (ratio * count as f64).round() as usize);
    }
}

#[test]
fn digests_do_not_collide_on_a_large_corpus() {
    let keys = Keyring::new(9);
    let mut seen = BTreeSet::new();
    for nonce in 0..100_000u64 {
        let tx = build(&keys, nonce, &[format!("k{}", nonce % 97)], vec![]);
        assert!(seen.insert(tx.id), "collision at nonce {nonce}");
    }
}

// ---------------------------------------------------------------------------
// Network

#[derive(Clone, Debug)]
struct Probe {
    id: usize,
}

impl TraceLabel for Probe {
    fn trace_label(&self) -> String {
        format!("p{}", self.id)
    }
}

#[derive(Clone, Debug)]
struct Tick(usize);

impl TraceLabel for Tick {
    fn trace_label(&self) -> String {
        format!("t{}", self.0)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn links_are_fifo_and_bounded_after_gst(
        seed in any::<u64>(),
        sends in proptest::collection::vec((0u32..4, 0u32..4, 0u64..3_000), 1..80),
        jitter in 0.0f64..40.0,
        gst in 0.0f64..2.0,
    ) {
        let delta = ms(100.0);
        let mut link = LinkModel::uniform(4, ms(5.0), ms(jitter), delta);
        link.gst = ms(gst * 1000.0);
        link.pre_gst_extra = ms(500.0);
        let mut net: SimNet<Probe, Tick> = SimNet::new(link, seed, 1);
        let mut sent_at: Vec<SimTime> = vec![0; sends.len()];
        for (k, &(from, _, at)) in sends.iter().enumerate() {
            net.set_timer(from, ms(at as f64), Tick(k));
        }
        let mut arrivals: Vec<(u32, u32, usize, SimTime)> = Vec::new();
        net.run_until(ms(60_000.0), |net, d| match d {
            Delivery::Timer { timer, .. } => {
                let k = timer.0;
                let (from, to, _) = sends[k];
                sent_at[k] = net.now();
                net.send(from, to, Probe { id: k }, 0);
            }
            Delivery::Message { from, to, msg } => arrivals.push((from, to, msg.id, net.now())),
        });
        prop_assert_eq!(arrivals.len(), sends.len());
        let mut last: BTreeMap<(u32, u32), (SimTime, usize)> = BTreeMap::new();
        for &(from, to, k, at) in &arrivals {
            let sent = sent_at[k];
            if sent >= ms(gst * 1000.0) {
                prop_assert!(at - sent <= delta, "late by {}", at - sent - delta);
            }
            if let Some(&(prev_sent, prev_k)) = last.get(&(from, to)) {
                prop_assert!(prev_sent <= sent, "{} overtaken by {}", prev_k, k);
            }
            last.insert((from, to), (sent, k));
        }
    }
}

#[test]
fn same_seed_same_trace() {
    let mut c = ScenarioConfig {
        seed: 11,
        ..Default::default()
    };
    c.workload.tx_count = 200;
    c.workload.cross_ratio = 0.3;
    c.network.jitter_ms = 2.0;
    let a = hydra::harness::scenario::run_traced(&c).unwrap();
    let b = hydra::harness::scenario::run_traced(&c).unwrap();
    assert_eq!(a.fingerprint, b.fingerprint);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.report, b.report);
}

// ---------------------------------------------------------------------------
// Deadlock resolver

fn key_on(m: u32, i: InstanceId, salt: &str) -> String {
    (0..)
        .map(|k| format!("{salt}{k}"))
        .find(|s| assign(&ObjectKey::from(s.as_str()), m) == i)
        .unwrap()
}

/// Random spans, random per-log order, every log delivered as one block.
fn random_logs(seed: u64) -> Orderer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = Keyring::new(seed);
    let m = rng.gen_range(2..=4u32);
    let mut per: Vec<Vec<Arc<TransactionDag>>> = vec![Vec::new(); m as usize];
    for nonce in 0..rng.gen_range(2..=14u64) {
        let width = rng.gen_range(1..=m.min(3)) as usize;
        let mut ins: Vec<u32> = (0..m).collect();
        ins.shuffle(&mut rng);
        ins.truncate(width);
        let objs: Vec<String> = ins.iter().map(|&i| key_on(m, i, &format!("x{nonce}-"))).collect();
        let tx = Arc::new(build(&keys, nonce, &objs, vec![]));
        for i in ins {
            per[i as usize].push(tx.clone());
        }
    }
    let mut ord = Orderer::new(OrdererConfig {
        m,
        epoch_len: 16,
        abort_grace: 1,
    });
    for (i, mut txs) in per.into_iter().enumerate() {
        txs.shuffle(&mut rng);
        let block = Block {
            txs,
            ..Block::empty(i as InstanceId, 0)
        };
        ord.on_sb_deliver(&Arc::new(block)).unwrap();
    }
    ord
}

/// Members on a cycle of the pairwise waits-for relation (a waits for b if
/// b is ahead of a in some shared log).
#[allow(clippy::needless_range_loop)]
fn oracle_cycle_nodes(ord: &Orderer, members: &BTreeSet<TxDigest>) -> BTreeSet<TxDigest> {
    let live: Vec<TxDigest> = members.iter().copied().collect();
    let n = live.len();
    let mut reach = vec![vec![false; n]; n];
    for (x, a) in live.iter().enumerate() {
        let ra = ord.record(a).unwrap();
        for (y, b) in live.iter().enumerate() {
            let rb = ord.record(b).unwrap();
            reach[x][y] = ra
                .instances
                .intersection(&rb.instances)
                .any(|i| ra.pos[i] > rb.pos[i]);
        }
    }
    for k in 0..n {
        for x in 0..n {
            if reach[x][k] {
                for y in 0..n {
                    if reach[k][y] {
                        reach[x][y] = true;
                    }
                }
            }
        }
    }
    (0..n).filter(|&x| reach[x][x]).map(|x| live[x]).collect()
}

fn without(g: &DeadlockGroup, gone: &[TxDigest]) -> DeadlockGroup {
    let mut h = g.clone();
    for d in gone {
        h.remove(d);
    }
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cycle_nodes_match_pairwise_oracle(seed in any::<u64>()) {
        let ord = random_logs(seed);
        let g = cut_deadlock_group(&ord, 0);
        prop_assert_eq!(cycle_nodes(&g), oracle_cycle_nodes(&ord, &g.members));
    }

    #[test]
    fn victims_break_every_cycle(seed in any::<u64>()) {
        let ord = random_logs(seed);
        let g = cut_deadlock_group(&ord, 0);
        let victims = select_victims(&g);
        let mut rest = g.members.clone();
        for (k, v) in victims.iter().enumerate() {
            // Each victim lay on a cycle of what was left when it was picked.
            prop_assert!(oracle_cycle_nodes(&ord, &rest).contains(v));
            rest.remove(v);
            prop_assert!(without(&g, &victims[..=k]).members == rest);
        }
        prop_assert!(oracle_cycle_nodes(&ord, &rest).is_empty());
        prop_assert_eq!(select_victims(&g.clone()), victims);
    }
}

// ---------------------------------------------------------------------------
// Execution model

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn disjoint_makespan_law(n in 1usize..300, k in 1usize..10, m in 1u32..6) {
        let keys = Keyring::new(ScenarioConfig::default().seed);
        let txs: Vec<Arc<TransactionDag>> = (0..n)
            .map(|j| Arc::new(build(&keys, j as u64, &[format!("d{j}")], vec![])))
            .collect();
        let got = execution_makespan(Mode::Hydra, m, k, 1.0, &txs).unwrap();
        prop_assert_eq!(got, n.div_ceil(k) as u64 * ms(1.0));
        let serial = execution_makespan(Mode::Iss, m, k, 1.0, &txs).unwrap();
        prop_assert_eq!(serial, n as u64 * ms(1.0));
    }
}

// ---------------------------------------------------------------------------
// End to end

fn small_run(seed: u64, mode: Mode) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4..=7);
    let mut c = ScenarioConfig {
        mode,
        seed,
        n,
        record_history: true,
        ..Default::default()
    };
    c.protocol.min_epochs = 1;
    c.network.jitter_ms = rng.gen_range(0.0..4.0);
    c.execution.vertex_cost_ms = 0.05;
    c.workload.tx_count = rng.gen_range(20..120);
    c.workload.cross_ratio = rng.gen_range(0.0..1.0);
    c.workload.object_universe = rng.gen_range(20..80);
    c.workload.amount = 250;
    if rng.gen_bool(0.5) {
        c.faults.push(FaultConfig {
            kind: FaultKindConfig::Straggler,
            target: rng.gen_range(0..n),
            factor: rng.gen_range(1.0..8.0),
            at_ms: 0.0,
        });
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_request_is_answered_once(seed in 0..i64::MAX as u64, iss in any::<bool>()) {
        let mode = if iss { Mode::Iss } else { Mode::Hydra };
        let c = small_run(seed, mode);
        let r = run_scenario(&c).unwrap();
        let rep = &r.report;
        prop_assert_eq!(rep.submitted, rep.replied_success + rep.replied_failure);
        prop_assert_eq!(r.outcomes.len(), c.workload.tx_count);
        let idx: BTreeSet<usize> = r.outcomes.iter().map(|o| o.index).collect();
        prop_assert_eq!(idx.len(), r.outcomes.len());
        for o in &r.outcomes {
            prop_assert!(o.timeline.is_monotone(), "{:?}", o.timeline);
        }
        let sum = rep.breakdown_sum_ms();
        prop_assert!((sum - rep.mean_latency_ms).abs() <= 0.01 * rep.mean_latency_ms.max(1.0));
    }

    #[test]
    fn replicas_with_equal_logs_agree(seed in 0..i64::MAX as u64) {
        let r = run_scenario(&small_run(seed, Mode::Hydra)).unwrap();
        let honest: Vec<_> = r.honest().collect();
        for a in &honest {
            for b in &honest {
                if a.frontier == b.frontier {
                    prop_assert_eq!(a.store_digest, b.store_digest);
                    prop_assert_eq!(a.stats.unconfirmed_aborts, b.stats.unconfirmed_aborts);
                    prop_assert_eq!(a.stats.victim_aborts, b.stats.victim_aborts);
                    let sa: Vec<_> = a.history.iter().map(|c| (c.tx.id, c.success)).collect();
                    let sb: Vec<_> = b.history.iter().map(|c| (c.tx.id, c.success)).collect();
                    prop_assert_eq!(sa.len(), sb.len());
                    prop_assert_eq!(
                        sa.into_iter().collect::<BTreeSet<_>>(),
                        sb.into_iter().collect::<BTreeSet<_>>()
                    );
                }
            }
        }
    }

    #[test]
    fn baseline_store_is_serial_replay(seed in 0..i64::MAX as u64) {
        let c = small_run(seed, Mode::Iss);
        let r = run_scenario(&c).unwrap();
        let initial = c.execution.initial_balance;
        for h in r.honest() {
            let mut store: BTreeMap<ObjectKey, i64> = BTreeMap::new();
            for committed in &h.history {
                let mut staged = Vec::new();
                let mut ok = true;
                for v in &committed.tx.vertices {
                    let pre = store.get(&v.object).copied().unwrap_or(initial);
                    match v.apply(pre) {
                        Some(nv) => staged.push((v.object.clone(), nv)),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                prop_assert_eq!(ok, committed.success);
                if ok {
                    store.extend(staged);
                }
            }
            prop_assert_eq!(&store, &h.store);
        }
    }
}
