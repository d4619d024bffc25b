//! Lock-based execution of confirmed transactions.
//!
//! The head of each instance log takes the locks of its objects in that
//! instance, in ascending key order. Once a transaction holds every lock it
//! needs and an executor slot is free it is dispatched: the cursors of all its
//! instances pass it and a completion is scheduled. Effects are applied and
//! locks released (FIFO to waiters) at completion.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::model::{
    sha256, toposort, Encoder, InstanceId, ObjectKey, ReplicaId, TransactionDag, TxDigest,
};
use crate::orderer::{Orderer, Pos};
use crate::partitioner::assign;

#[derive(Clone, Debug, Default)]
struct LockState {
    holder: Option<TxDigest>,
    waiters: VecDeque<TxDigest>,
}

/// Per-object holder plus FIFO waiter queue.
#[derive(Clone, Debug, Default)]
pub struct LockTable {
    table: HashMap<ObjectKey, LockState>,
}

impl LockTable {
    /// Grants the lock or enqueues `tx` as a waiter. Returns whether `tx`
    /// holds the lock afterwards.
    pub fn acquire(&mut self, o: &ObjectKey, tx: TxDigest) -> bool {
        let st = self.table.entry(o.clone()).or_default();
        match st.holder {
            None => {
                st.holder = Some(tx);
                true
            }
            Some(h) if h == tx => true,
            Some(_) => {
                if !st.waiters.contains(&tx) {
                    st.waiters.push_back(tx);
                }
                false
            }
        }
    }

    /// Releases `o` if held by `tx` (or drops `tx` from its waiters) and
    /// returns the waiter that now holds it.
    pub fn release(&mut self, o: &ObjectKey, tx: TxDigest) -> Option<TxDigest> {
        let st = self.table.get_mut(o)?;
        st.waiters.retain(|w| *w != tx);
        let mut granted = None;
        if st.holder == Some(tx) {
            st.holder = st.waiters.pop_front();
            granted = st.holder;
        }
        if st.holder.is_none() && st.waiters.is_empty() {
            self.table.remove(o);
        }
        granted
    }

    pub fn holder(&self, o: &ObjectKey) -> Option<TxDigest> {
        self.table.get(o).and_then(|s| s.holder)
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Prior values, replayed in reverse on rollback.
#[derive(Clone, Debug, Default)]
pub struct UndoLog {
    pub entries: Vec<(ObjectKey, i64)>,
}

impl UndoLog {
    pub fn rollback(self, work: &mut BTreeMap<ObjectKey, i64>) {
        for (o, v) in self.entries.into_iter().rev() {
            work.insert(o, v);
        }
    }
}

/// Object store with per-object write history keyed by log position in the
/// object's owning instance, so that the value at any cut can be recovered.
#[derive(Clone, Debug)]
pub struct Store {
    initial: i64,
    values: BTreeMap<ObjectKey, i64>,
    history: BTreeMap<ObjectKey, Vec<(Pos, i64)>>,
}

impl Store {
    pub fn new(initial: i64) -> Self {
        Store {
            initial,
            values: BTreeMap::new(),
            history: BTreeMap::new(),
        }
    }

    pub fn get(&self, o: &ObjectKey) -> i64 {
        self.values.get(o).copied().unwrap_or(self.initial)
    }

    pub fn values(&self) -> &BTreeMap<ObjectKey, i64> {
        &self.values
    }

    pub fn set(&mut self, o: &ObjectKey, v: i64, at: Option<Pos>) {
        self.values.insert(o.clone(), v);
        if let Some(p) = at {
            self.history.entry(o.clone()).or_default().push((p, v));
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut e = Encoder::new();
        for (k, v) in &self.values {
            e.var(k.as_bytes());
            e.i64(*v);
        }
        sha256(e.bytes())
    }

    /// Digest of each object's value after its last write at or below `cut`.
    pub fn cut_digest(&self, cut: u64) -> [u8; 32] {
        let mut e = Encoder::new();
        for (k, h) in &self.history {
            if let Some((_, v)) = h.iter().rev().find(|(p, _)| p.sn <= cut) {
                e.var(k.as_bytes());
                e.i64(*v);
            }
        }
        sha256(e.bytes())
    }

    /// Keeps only the latest write at or below `cut` per object.
    pub fn gc_history(&mut self, cut: u64) {
        for h in self.history.values_mut() {
            let below = h.iter().take_while(|(p, _)| p.sn <= cut).count();
            if below > 1 {
                h.drain(..below - 1);
            }
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.values().map(|h| h.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecOutcome {
    pub success: bool,
    pub writes: Vec<(ObjectKey, i64)>,
}

/// Applies vertices in topological order against a scratch copy of the
/// touched objects; any failed condition rolls everything back.
pub fn execute_tx(store: &Store, tx: &TransactionDag) -> ExecOutcome {
    let order = match toposort(tx) {
        Ok(o) => o,
        Err(_) => {
            return ExecOutcome {
                success: false,
                writes: Vec::new(),
            }
        }
    };
    let mut work: BTreeMap<ObjectKey, i64> = BTreeMap::new();
    let mut undo = UndoLog::default();
    for k in order {
        let v = &tx.vertices[k];
        let pre = *work.entry(v.object.clone()).or_insert_with(|| store.get(&v.object));
        match v.apply(pre) {
            Some(post) => {
                undo.entries.push((v.object.clone(), pre));
                work.insert(v.object.clone(), post);
            }
            None => {
                undo.rollback(&mut work);
                return ExecOutcome {
                    success: false,
                    writes: Vec::new(),
                };
            }
        }
    }
    ExecOutcome {
        success: true,
        writes: work.into_iter().collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplyStatus {
    Success,
    Failure,
    /// Not executed; `retry` names the attempt that replaces it.
    Aborted,
}

/// Timestamps (µs) attached to replies so the client can split latency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplyTimeline {
    pub proposed_at: u64,
    pub delivered_at: u64,
    pub exec_start: u64,
    pub executed_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientReply {
    pub tx_id: TxDigest,
    pub status: ReplyStatus,
    pub replica: ReplicaId,
    pub at_us: u64,
    /// Set on aborts: the attempt the replicas will retry.
    pub retry: Option<TxDigest>,
    pub timeline: ReplyTimeline,
}

impl ClientReply {
    pub fn time_ms(&self) -> f64 {
        self.at_us as f64 / 1000.0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(&self.tx_id.0);
        e.u8(match self.status {
            ReplyStatus::Success => 1,
            ReplyStatus::Failure => 2,
            ReplyStatus::Aborted => 3,
        });
        e.u32(self.replica);
        e.u64(self.at_us);
        match &self.retry {
            Some(r) => {
                e.u8(1);
                e.raw(&r.0);
            }
            None => e.u8(0),
        }
        e.into_bytes()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advance {
    Dispatched(TxDigest),
    Blocked,
    Idle,
}

#[derive(Clone, Debug)]
pub struct ExecEngine {
    pub locks: LockTable,
    pub store: Store,
    pub slots: usize,
    busy: usize,
    held: HashMap<TxDigest, BTreeSet<ObjectKey>>,
    ready: VecDeque<TxDigest>,
    running: BTreeMap<TxDigest, u64>,
    m: u32,
}

impl ExecEngine {
    pub fn new(m: u32, slots: usize, initial_balance: i64) -> Self {
        assert!(slots >= 1);
        ExecEngine {
            locks: LockTable::default(),
            store: Store::new(initial_balance),
            slots,
            busy: 0,
            held: HashMap::new(),
            ready: VecDeque::new(),
            running: BTreeMap::new(),
            m,
        }
    }

    pub fn is_running(&self, d: &TxDigest) -> bool {
        self.running.contains_key(d)
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }

    pub fn exec_start(&self, d: &TxDigest) -> Option<u64> {
        self.running.get(d).copied()
    }

    pub fn holds_all(&self, tx: &TransactionDag) -> bool {
        let need: BTreeSet<&ObjectKey> = tx.objects().collect();
        self.held.get(&tx.id).map_or(0, |h| h.len()) == need.len()
    }

    /// One step of the execution loop for instance `i`.
    pub fn try_advance(&mut self, ord: &mut Orderer, i: InstanceId, now: u64) -> Advance {
        let Some(d) = ord.first_pending(i) else { return Advance::Idle };
        let tx = ord.record(&d).expect("pending tx has a record").tx.clone();
        let mine: BTreeSet<&ObjectKey> = tx.objects().filter(|o| assign(o, self.m) == i).collect();
        for o in mine {
            if self.locks.acquire(o, d) {
                self.held.entry(d).or_default().insert(o.clone());
            }
        }
        if !self.holds_all(&tx) {
            return Advance::Blocked;
        }
        if self.busy < self.slots && self.ready.front().is_none_or(|f| *f == d) {
            if self.ready.front() == Some(&d) {
                self.ready.pop_front();
            }
            self.dispatch(ord, d, now);
            Advance::Dispatched(d)
        } else {
            if !self.ready.contains(&d) {
                self.ready.push_back(d);
            }
            Advance::Blocked
        }
    }

    fn dispatch(&mut self, ord: &mut Orderer, d: TxDigest, now: u64) {
        ord.mark_dispatched(&d);
        self.busy += 1;
        self.running.insert(d, now);
    }

    /// Dispatches transactions that hold all locks and were waiting for a slot.
    pub fn dispatch_ready(&mut self, ord: &mut Orderer, now: u64) -> Vec<TxDigest> {
        let mut out = Vec::new();
        while self.busy < self.slots {
            let Some(d) = self.ready.pop_front() else { break };
            let ok = ord.record(&d).is_some_and(|r| r.is_pending() && self.holds_all(&r.tx));
            if ok {
                self.dispatch(ord, d, now);
                out.push(d);
            }
        }
        out
    }

    /// Completes a dispatched transaction: applies effects, releases locks.
    /// Returns the outcome and the instances whose heads may now progress.
    pub fn complete(&mut self, ord: &mut Orderer, d: &TxDigest) -> (ExecOutcome, BTreeSet<InstanceId>) {
        let rec = ord.record(d).expect("completing unknown tx");
        let tx = rec.tx.clone();
        let pos = rec.pos.clone();
        let out = execute_tx(&self.store, &tx);
        for (o, v) in &out.writes {
            let at = pos.get(&assign(o, self.m)).copied();
            self.store.set(o, *v, at);
        }
        ord.mark_executed(d, out.success);
        self.running.remove(d);
        self.busy -= 1;
        let touched = self.release_all(d);
        (out, touched)
    }

    /// Drops every lock and wait entry of `d` (completion or abort).
    pub fn release_all(&mut self, d: &TxDigest) -> BTreeSet<InstanceId> {
        let mut touched = BTreeSet::new();
        self.ready.retain(|r| r != d);
        if let Some(objs) = self.held.remove(d) {
            for o in objs {
                touched.insert(assign(&o, self.m));
                if let Some(w) = self.locks.release(&o, *d) {
                    self.held.entry(w).or_default().insert(o.clone());
                }
            }
        }
        touched
    }

    /// Removes `d` from waiter queues it may sit in without holding them.
    pub fn forget_waiter(&mut self, d: &TxDigest, objects: impl IntoIterator<Item = ObjectKey>) {
        for o in objects {
            self.locks.release(&o, *d);
        }
    }

    pub fn held_by(&self, d: &TxDigest) -> usize {
        self.held.get(d).map_or(0, |h| h.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Keyring, Op, Party, VertexSpec};

    fn transfer(from: &str, to: &str, amount: i64) -> TransactionDag {
        let keys = Keyring::new(1);
        TransactionDag::build(
            &keys,
            Party::Client(0),
            1,
            vec![VertexSpec::new(from, Op::Sub, amount), VertexSpec::new(to, Op::Add, amount)],
            [(0, 1)],
        )
    }

    #[test]
    fn transfer_succeeds() {
        let mut s = Store::new(0);
        s.set(&"A".into(), 100, None);
        let out = execute_tx(&s, &transfer("A", "B", 10));
        assert!(out.success);
        assert_eq!(out.writes, vec![("A".into(), 90), ("B".into(), 10)]);
    }

    #[test]
    fn insufficient_balance_rolls_back() {
        let mut s = Store::new(0);
        s.set(&"A".into(), 5, None);
        let out = execute_tx(&s, &transfer("A", "B", 10));
        assert!(!out.success);
        assert!(out.writes.is_empty());
    }

    #[test]
    fn set_chain_last_writer_wins() {
        let keys = Keyring::new(1);
        let tx = TransactionDag::build(
            &keys,
            Party::Client(0),
            1,
            vec![
                VertexSpec::new("X", Op::Set, 3),
                VertexSpec::new("X", Op::Set, 7),
                VertexSpec::new("X", Op::Set, 5),
            ],
            [(0, 1), (1, 2)],
        );
        let out = execute_tx(&Store::new(0), &tx);
        assert_eq!(out.writes, vec![("X".into(), 5)]);
    }

    #[test]
    fn fifo_lock_grants() {
        let mut l = LockTable::default();
        let (a, b, c) = (TxDigest([1; 32]), TxDigest([2; 32]), TxDigest([3; 32]));
        let o: ObjectKey = "A".into();
        assert!(l.acquire(&o, a));
        assert!(!l.acquire(&o, b));
        assert!(!l.acquire(&o, c));
        assert_eq!(l.release(&o, a), Some(b));
        assert_eq!(l.release(&o, b), Some(c));
        assert_eq!(l.release(&o, c), None);
        assert!(l.is_empty());
    }

    #[test]
    fn cut_digest_uses_history() {
        let mut s = Store::new(0);
        let o: ObjectKey = "A".into();
        s.set(&o, 1, Some(Pos::new(0, 0)));
        s.set(&o, 2, Some(Pos::new(5, 0)));
        let mut t = Store::new(0);
        t.set(&o, 1, Some(Pos::new(0, 0)));
        assert_eq!(s.cut_digest(3), t.cut_digest(3));
        assert_ne!(s.cut_digest(5), t.cut_digest(5));
        s.gc_history(3);
        assert_eq!(s.history_len(), 2);
    }
}
