//! Ordering-conflict deadlocks among confirmed cross-instance transactions.
//!
//! Every function here is pure over an orderer snapshot: it reads delivered
//! positions and pending status only, never timing or lock grants.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::exec::ExecEngine;
use crate::model::{InstanceId, SeqNum, TransactionDag, TxDigest};
use crate::orderer::{AbortKind, Orderer, Pos};
use crate::partitioner::Partitioner;

/// Members of one instance log in delivery order. Members not yet delivered
/// there wait behind the last delivered one and are mutually unordered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Chain {
    pub ordered: Vec<TxDigest>,
    pub undelivered: Vec<TxDigest>,
}

/// A candidate deadlock. Waits-for edges are implied by the chains: a member
/// waits for every member ahead of it in a shared log, and the transitive
/// closure of consecutive links gives the same reachability.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeadlockGroup {
    pub members: BTreeSet<TxDigest>,
    pub chains: BTreeMap<InstanceId, Chain>,
    /// Pairs ordered one way in one shared log and the other way in another,
    /// stored as `(smaller, larger)`.
    pub conflicts: BTreeSet<(TxDigest, TxDigest)>,
}

/// `a` is ahead of `b` in one log: delivered, and `b` later or not yet there.
fn ahead(a: Option<Pos>, b: Option<Pos>) -> bool {
    match (a, b) {
        (Some(pa), Some(pb)) => pa < pb,
        (Some(_), None) => true,
        _ => false,
    }
}

impl DeadlockGroup {
    pub fn build(ord: &Orderer, members: BTreeSet<TxDigest>) -> Self {
        let mut sorted: BTreeMap<InstanceId, Vec<(Pos, TxDigest)>> = BTreeMap::new();
        let mut chains: BTreeMap<InstanceId, Chain> = BTreeMap::new();
        for d in &members {
            let Some(rec) = ord.record(d) else { continue };
            for &i in &rec.instances {
                match rec.pos.get(&i) {
                    Some(p) => sorted.entry(i).or_default().push((*p, *d)),
                    None => chains.entry(i).or_default().undelivered.push(*d),
                }
            }
        }
        for (i, mut v) in sorted {
            v.sort();
            chains.entry(i).or_default().ordered = v.into_iter().map(|(_, d)| d).collect();
        }
        let conflicts = pairwise_conflicts(ord, &members);
        DeadlockGroup {
            members,
            chains,
            conflicts,
        }
    }

    /// Members with a conflict partner still in the group.
    fn conflicting(&self) -> BTreeSet<TxDigest> {
        let mut out = BTreeSet::new();
        for (a, b) in &self.conflicts {
            if self.members.contains(a) && self.members.contains(b) {
                out.insert(*a);
                out.insert(*b);
            }
        }
        out
    }

    /// Consecutive-link edges `(a, b)`: a waits for b.
    pub fn waits_for(&self) -> BTreeSet<(TxDigest, TxDigest)> {
        let mut out = BTreeSet::new();
        for c in self.chains.values() {
            for w in c.ordered.windows(2) {
                out.insert((w[1], w[0]));
            }
            if let Some(last) = c.ordered.last() {
                out.extend(c.undelivered.iter().map(|u| (*u, *last)));
            }
        }
        out
    }

    pub fn remove(&mut self, d: &TxDigest) {
        self.members.remove(d);
        for c in self.chains.values_mut() {
            c.ordered.retain(|x| x != d);
            c.undelivered.retain(|x| x != d);
        }
    }
}

fn pending(ord: &Orderer, d: &TxDigest) -> bool {
    ord.record(d).is_some_and(|r| r.is_pending())
}

/// Pending transactions ordered before `tx` in one of its instances but after
/// it (or not yet delivered) in another.
pub fn find_ordering_conflicts(ord: &Orderer, tx: &TxDigest) -> BTreeSet<TxDigest> {
    let mut out = BTreeSet::new();
    let Some(rec) = ord.record(tx) else { return out };
    for (&i, &pi) in &rec.pos {
        for (_, other) in ord.pending_before(i, pi) {
            let o = ord.record(other).expect("pending entries have records");
            for &j in &rec.instances {
                if j == i || !o.instances.contains(&j) {
                    continue;
                }
                let later_in_j = match (o.pos.get(&j), rec.pos.get(&j)) {
                    (Some(po), Some(pt)) => po > pt,
                    (None, Some(_)) => true,
                    _ => false,
                };
                if later_in_j {
                    out.insert(*other);
                    break;
                }
            }
        }
    }
    out
}

/// Immediate waits-for successors of `a` in the pending graph: the nearest
/// pending predecessor in each log holding `a`, or the last pending entry of
/// each involved log that has not delivered `a` yet.
fn successors(ord: &Orderer, a: &TxDigest) -> Vec<TxDigest> {
    let Some(rec) = ord.record(a) else { return Vec::new() };
    let mut out = Vec::new();
    for &i in &rec.instances {
        let next = match rec.pos.get(&i) {
            Some(&p) => ord.pending_before(i, p).next_back().map(|(_, d)| *d),
            None => ord.logs[i as usize].pending.values().next_back().copied(),
        };
        if let Some(d) = next {
            if d != *a {
                out.push(d);
            }
        }
    }
    out
}

/// Strongly connected component of `tx` in the pending waits-for graph.
pub fn pending_scc(ord: &Orderer, tx: &TxDigest) -> BTreeSet<TxDigest> {
    let mut fwd: BTreeMap<TxDigest, Vec<TxDigest>> = BTreeMap::new();
    let mut queue = VecDeque::from([*tx]);
    while let Some(a) = queue.pop_front() {
        if fwd.contains_key(&a) {
            continue;
        }
        let succ: Vec<_> = successors(ord, &a).into_iter().filter(|d| pending(ord, d)).collect();
        for s in &succ {
            if !fwd.contains_key(s) {
                queue.push_back(*s);
            }
        }
        fwd.insert(a, succ);
    }
    let mut rev: BTreeMap<TxDigest, Vec<TxDigest>> = BTreeMap::new();
    for (a, succ) in &fwd {
        for s in succ {
            rev.entry(*s).or_default().push(*a);
        }
    }
    let mut scc = BTreeSet::from([*tx]);
    let mut queue = VecDeque::from([*tx]);
    while let Some(b) = queue.pop_front() {
        for a in rev.get(&b).into_iter().flatten() {
            if scc.insert(*a) {
                queue.push_back(*a);
            }
        }
    }
    scc
}

/// Every pair of members ordered inconsistently across two shared logs.
fn pairwise_conflicts(ord: &Orderer, members: &BTreeSet<TxDigest>) -> BTreeSet<(TxDigest, TxDigest)> {
    type Row = (TxDigest, Option<Pos>, Option<Pos>);
    let mut by_pair: BTreeMap<(InstanceId, InstanceId), Vec<Row>> = BTreeMap::new();
    for d in members {
        let Some(rec) = ord.record(d) else { continue };
        let ins: Vec<InstanceId> = rec.instances.iter().copied().collect();
        for (x, &i) in ins.iter().enumerate() {
            for &j in &ins[x + 1..] {
                by_pair
                    .entry((i, j))
                    .or_default()
                    .push((*d, rec.pos.get(&i).copied(), rec.pos.get(&j).copied()));
            }
        }
    }
    let mut out = BTreeSet::new();
    for rows in by_pair.values() {
        for (x, a) in rows.iter().enumerate() {
            for b in &rows[x + 1..] {
                let inverted = (ahead(a.1, b.1) && ahead(b.2, a.2)) || (ahead(b.1, a.1) && ahead(a.2, b.2));
                if inverted {
                    out.insert((a.0.min(b.0), a.0.max(b.0)));
                }
            }
        }
    }
    out
}

/// Least fixed point of conflict expansion from `tx`, joined with the
/// strongly connected component of `tx` so that ring cycles with no pairwise
/// inversion are caught too.
pub fn expand_deadlock_group(ord: &Orderer, tx: &TxDigest) -> DeadlockGroup {
    let mut members = BTreeSet::from([*tx]);
    loop {
        let prev = members.clone();
        for d in &prev {
            members.extend(find_ordering_conflicts(ord, d));
        }
        if members == prev {
            break;
        }
    }
    members.extend(pending_scc(ord, tx));
    members.retain(|d| pending(ord, d));
    DeadlockGroup::build(ord, members)
}

/// Members lying on at least one waits-for cycle: those in a strongly
/// connected component with two or more members.
pub fn cycle_nodes(g: &DeadlockGroup) -> BTreeSet<TxDigest> {
    let ids: Vec<TxDigest> = g.members.iter().copied().collect();
    let index_of = |d: &TxDigest| ids.binary_search(d).ok();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
    for (a, b) in g.waits_for() {
        if let (Some(a), Some(b)) = (index_of(&a), index_of(&b)) {
            adj[a].push(b);
        }
    }
    let mut out = BTreeSet::new();
    for comp in tarjan(&adj) {
        if comp.len() > 1 {
            out.extend(comp.into_iter().map(|v| ids[v]));
        }
    }
    out
}

/// Iterative Tarjan; returns the strongly connected components.
fn tarjan(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = adj.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut next = 0;
    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        let mut calls = vec![(root, 0usize)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut ei)) = calls.last_mut() {
            if let Some(&w) = adj[v].get(*ei) {
                *ei += 1;
                if index[w] == UNSEEN {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    calls.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            calls.pop();
            if low[v] == index[v] {
                let mut comp = Vec::new();
                while let Some(w) = stack.pop() {
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comps.push(comp);
            }
            if let Some(&(p, _)) = calls.last() {
                low[p] = low[p].min(low[v]);
            }
        }
    }
    comps
}

pub fn has_deadlock(d: &DeadlockGroup) -> bool {
    !cycle_nodes(d).is_empty()
}

/// Removes members until no cycle is left, smallest digest first among the
/// cycle members that have an ordering conflict. Members that are only
/// queued behind a conflicting pair are never chosen; a pure ring with no
/// pairwise conflict falls back to any cycle member.
pub fn select_victims(d: &DeadlockGroup) -> Vec<TxDigest> {
    let mut g = d.clone();
    let mut victims = Vec::new();
    loop {
        let cyc = cycle_nodes(&g);
        if cyc.is_empty() {
            break;
        }
        let conflicting = g.conflicting();
        let v = *cyc
            .iter()
            .find(|c| conflicting.contains(c))
            .unwrap_or_else(|| cyc.iter().next().expect("non-empty"));
        g.remove(&v);
        victims.push(v);
    }
    victims
}

/// Confirmed, still-pending transactions whose every position lies at or
/// below `cut`, with their waits-for edges. This set is fixed by the log
/// prefixes up to the cut, so every replica computes the same group no
/// matter when it runs the check.
pub fn cut_deadlock_group(ord: &Orderer, cut: SeqNum) -> DeadlockGroup {
    let mut members = BTreeSet::new();
    for (d, rec) in ord.records_iter() {
        if rec.is_pending() && rec.tracker.confirmed && rec.pos.values().all(|p| p.sn <= cut) {
            members.insert(*d);
        }
    }
    DeadlockGroup::build(ord, members)
}

#[derive(Clone, Debug)]
pub struct Aborted {
    pub id: TxDigest,
    pub retry: Arc<TransactionDag>,
    /// Instances whose heads may now progress.
    pub touched: BTreeSet<InstanceId>,
}

/// Aborts `d` in the orderer and lock table and puts its retry at the front
/// of the buckets.
pub fn abort_one(
    ord: &mut Orderer,
    exec: &mut ExecEngine,
    part: &mut Partitioner,
    d: &TxDigest,
    kind: AbortKind,
) -> Option<Aborted> {
    let rec = ord.record(d)?;
    let tx = rec.tx.clone();
    let mut touched = rec.instances.clone();
    if kind == AbortKind::Victim {
        ord.abort(d, kind);
    }
    touched.extend(exec.release_all(d));
    exec.forget_waiter(d, tx.objects().cloned());
    for i in 0..part.m {
        part.bucket_mut(i).remove(d);
    }
    let retry = Arc::new(tx.retry());
    part.reinsert_front(retry.clone());
    Some(Aborted {
        id: *d,
        retry,
        touched,
    })
}

pub fn abort_and_reinsert(
    ord: &mut Orderer,
    exec: &mut ExecEngine,
    part: &mut Partitioner,
    victims: &[TxDigest],
) -> Vec<Aborted> {
    victims
        .iter()
        .filter_map(|v| abort_one(ord, exec, part, v, AbortKind::Victim))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Block, Keyring, Op, Party, VertexSpec};
    use crate::orderer::OrdererConfig;
    use crate::partitioner::assign;

    fn key_on(m: u32, i: InstanceId, salt: &str) -> String {
        (0..)
            .map(|k| format!("{salt}{k}"))
            .find(|s| assign(&s.as_str().into(), m) == i)
            .unwrap()
    }

    fn tx(nonce: u64, objs: &[String]) -> Arc<TransactionDag> {
        let keys = Keyring::new(1);
        let specs = objs.iter().map(|o| VertexSpec::new(o.as_str(), Op::Add, 1)).collect();
        Arc::new(TransactionDag::build(&keys, Party::Client(0), nonce, specs, []))
    }

    fn deliver(o: &mut Orderer, ins: InstanceId, sn: SeqNum, txs: &[&Arc<TransactionDag>]) {
        let mut b = Block::empty(ins, sn);
        b.txs = txs.iter().map(|t| (*t).clone()).collect();
        o.on_sb_deliver(&Arc::new(b)).unwrap();
    }

    fn orderer(m: u32) -> Orderer {
        Orderer::new(OrdererConfig {
            m,
            epoch_len: 16,
            abort_grace: 1,
        })
    }

    #[test]
    fn two_cycle() {
        let a = key_on(2, 0, "a");
        let b = key_on(2, 1, "b");
        let t1 = tx(1, &[a.clone(), b.clone()]);
        let t2 = tx(2, &[b.clone(), a.clone()]);
        let mut o = orderer(2);
        deliver(&mut o, 0, 0, &[&t1, &t2]);
        deliver(&mut o, 1, 0, &[&t2, &t1]);
        assert_eq!(find_ordering_conflicts(&o, &t2.id), BTreeSet::from([t1.id]));
        let g = expand_deadlock_group(&o, &t2.id);
        assert_eq!(g.members, BTreeSet::from([t1.id, t2.id]));
        assert!(has_deadlock(&g));
        assert_eq!(select_victims(&g), vec![t1.id.min(t2.id)]);
    }

    #[test]
    fn no_conflict_is_singleton() {
        let a = key_on(2, 0, "a");
        let b = key_on(2, 1, "b");
        let t1 = tx(1, &[a.clone(), b.clone()]);
        let t2 = tx(2, &[a.clone(), b.clone()]);
        let mut o = orderer(2);
        deliver(&mut o, 0, 0, &[&t1, &t2]);
        deliver(&mut o, 1, 0, &[&t1, &t2]);
        let g = expand_deadlock_group(&o, &t2.id);
        assert_eq!(g.members, BTreeSet::from([t2.id]));
        assert!(!has_deadlock(&g));
        assert!(select_victims(&g).is_empty());
    }

    #[test]
    fn pending_in_other_instance_counts() {
        let a = key_on(2, 0, "a");
        let b = key_on(2, 1, "b");
        let t1 = tx(1, &[a.clone(), b.clone()]);
        let t2 = tx(2, &[a.clone(), b.clone()]);
        let mut o = orderer(2);
        deliver(&mut o, 0, 0, &[&t1, &t2]);
        deliver(&mut o, 1, 0, &[&t2]);
        assert_eq!(find_ordering_conflicts(&o, &t2.id), BTreeSet::from([t1.id]));
    }

    #[test]
    fn executed_prefix_excluded() {
        let a = key_on(2, 0, "a");
        let b = key_on(2, 1, "b");
        let t1 = tx(1, &[a.clone(), b.clone()]);
        let t2 = tx(2, &[a.clone(), b.clone()]);
        let mut o = orderer(2);
        deliver(&mut o, 0, 0, &[&t1, &t2]);
        o.abort(&t1.id, AbortKind::Victim);
        deliver(&mut o, 1, 0, &[&t2]);
        assert!(find_ordering_conflicts(&o, &t2.id).is_empty());
    }

    #[test]
    fn three_cycle_across_three_instances() {
        let k: Vec<String> = (0..3).map(|i| key_on(3, i, "k")).collect();
        let t1 = tx(1, &[k[0].clone(), k[1].clone()]);
        let t2 = tx(2, &[k[1].clone(), k[2].clone()]);
        let t3 = tx(3, &[k[2].clone(), k[0].clone()]);
        let mut o = orderer(3);
        deliver(&mut o, 0, 0, &[&t3, &t1]);
        deliver(&mut o, 1, 0, &[&t1, &t2]);
        deliver(&mut o, 2, 0, &[&t2, &t3]);
        let g = expand_deadlock_group(&o, &t1.id);
        assert_eq!(g.members, BTreeSet::from([t1.id, t2.id, t3.id]));
        assert!(has_deadlock(&g));
        let v = select_victims(&g);
        assert_eq!(v, vec![*g.members.iter().next().unwrap()]);
    }

    #[test]
    fn chain_is_not_a_deadlock() {
        let (a, b, c) = (TxDigest([1; 32]), TxDigest([2; 32]), TxDigest([3; 32]));
        let chain = |v: Vec<TxDigest>| Chain {
            ordered: v,
            undelivered: Vec::new(),
        };
        let g = DeadlockGroup {
            members: BTreeSet::from([a, b, c]),
            chains: BTreeMap::from([(0, chain(vec![c, b])), (1, chain(vec![b, a]))]),
            conflicts: BTreeSet::new(),
        };
        assert!(!has_deadlock(&g));
        assert!(!has_deadlock(&DeadlockGroup::default()));
    }

    #[test]
    fn bystanders_are_not_victims() {
        let a = key_on(2, 0, "a");
        let b = key_on(2, 1, "b");
        let t1 = tx(1, &[a.clone(), b.clone()]);
        let t2 = tx(2, &[b.clone(), a.clone()]);
        let mut o = orderer(2);
        // Intra-instance transactions queued between the inverted pair.
        let queued: Vec<_> = (10..30).map(|n| tx(n, std::slice::from_ref(&a))).collect();
        let mut log0 = vec![&t1];
        log0.extend(queued.iter());
        log0.push(&t2);
        deliver(&mut o, 0, 0, &log0);
        deliver(&mut o, 1, 0, &[&t2, &t1]);
        let g = cut_deadlock_group(&o, 0);
        assert_eq!(g.members.len(), 22);
        assert_eq!(cycle_nodes(&g).len(), 22);
        assert_eq!(g.conflicts, BTreeSet::from([(t1.id.min(t2.id), t1.id.max(t2.id))]));
        assert_eq!(select_victims(&g), vec![t1.id.min(t2.id)]);
    }

    fn chain_group(chains: &[&[u8]]) -> DeadlockGroup {
        let d = |b: u8| TxDigest([b; 32]);
        let mut g = DeadlockGroup::default();
        for (i, c) in chains.iter().enumerate() {
            g.members.extend(c.iter().map(|&b| d(b)));
            g.chains.insert(
                i as InstanceId,
                Chain {
                    ordered: c.iter().map(|&b| d(b)).collect(),
                    undelivered: Vec::new(),
                },
            );
        }
        g
    }

    #[test]
    fn path_between_cycles_is_not_on_a_cycle() {
        // {1,2} and {4,5} are cycles; 3 waits for 4 and is waited on by 2.
        let g = chain_group(&[&[2, 1], &[1, 2], &[3, 2], &[4, 3], &[4, 5], &[5, 4]]);
        let d = |b: u8| TxDigest([b; 32]);
        assert_eq!(cycle_nodes(&g), BTreeSet::from([d(1), d(2), d(4), d(5)]));
        assert_eq!(select_victims(&g), vec![d(1), d(4)]);
    }

    #[test]
    fn removal_keeps_transitive_waits() {
        // Log 0 orders 1, 2, 3; log 1 puts 3 ahead of 1. Removing 2 leaves the
        // 1/3 inversion in place.
        let g = chain_group(&[&[1, 2, 3], &[3, 1]]);
        let d = |b: u8| TxDigest([b; 32]);
        assert_eq!(select_victims(&g), vec![d(1)]);
        let mut h = g.clone();
        h.remove(&d(2));
        assert!(has_deadlock(&h));
    }
}
