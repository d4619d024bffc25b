//! Per-instance logs, vertex delivery tracking, confirmation, and the
//! unconfirmed-transaction abort rule.
//!
//! A transaction's position in a log is `(sn, offset)`. `pending[i]` holds the
//! positions in log `i` that are delivered but not yet dispatched or aborted;
//! its first entry is the execution cursor of instance `i`.
//!
//! Abort rule: a transaction delivered in instance `a` during `a`'s epoch `e`
//! and missing from involved instance `b` is aborted at the first block of
//! `b` whose running maximum attested frontier for `a` reaches the last sn of
//! epoch `e + grace`. A transaction carried by that very block counts as
//! delivered. The rule reads only delivered logs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::error::{HydraError, Result};
use crate::model::{Block, EpochId, InstanceId, SeqNum, SystemState, TransactionDag, TxDigest, NONE_SN};
use crate::partitioner::assign;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pos {
    pub sn: SeqNum,
    pub off: u32,
}

impl Pos {
    pub fn new(sn: SeqNum, off: u32) -> Self {
        Pos { sn, off }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbortKind {
    Unconfirmed,
    Victim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxStatus {
    Pending,
    Dispatched,
    Executed { success: bool },
    Aborted(AbortKind),
}

impl TxStatus {
    pub fn is_resolved(self) -> bool {
        matches!(self, TxStatus::Executed { .. } | TxStatus::Aborted(_))
    }
}

/// Per-vertex delivered flags.
#[derive(Clone, Debug)]
pub struct ConfirmationTracker {
    pub delivered: Vec<bool>,
    pub confirmed: bool,
}

#[derive(Clone, Debug)]
pub struct TxRecord {
    pub tx: Arc<TransactionDag>,
    pub instances: BTreeSet<InstanceId>,
    pub pos: BTreeMap<InstanceId, Pos>,
    pub tracker: ConfirmationTracker,
    pub status: TxStatus,
    pub proposed_at: u64,
    pub delivered_last_at: u64,
}

impl TxRecord {
    pub fn is_cross(&self) -> bool {
        self.instances.len() > 1
    }

    pub fn is_pending(&self) -> bool {
        self.status == TxStatus::Pending
    }

    pub fn fully_delivered(&self) -> bool {
        self.pos.len() == self.instances.len()
    }
}

#[derive(Clone, Debug)]
pub struct InstanceLog {
    pub instance: InstanceId,
    pub entries: BTreeMap<SeqNum, Arc<Block>>,
    pub frontier: i64,
    pub pending: BTreeMap<Pos, TxDigest>,
    attest_max: Vec<i64>,
    /// Per attested instance: running-max value -> first sn reaching it.
    breaks: Vec<BTreeMap<i64, SeqNum>>,
    /// (attested instance, deadline sn) -> txs missing from this log.
    waiting: BTreeMap<(InstanceId, SeqNum), BTreeSet<TxDigest>>,
}

impl InstanceLog {
    fn new(instance: InstanceId, m: usize) -> Self {
        InstanceLog {
            instance,
            entries: BTreeMap::new(),
            frontier: NONE_SN,
            pending: BTreeMap::new(),
            attest_max: vec![NONE_SN; m],
            breaks: vec![BTreeMap::new(); m],
            waiting: BTreeMap::new(),
        }
    }

    /// First sn of this log whose running-max attestation of `a` is at least `v`.
    pub fn first_attesting(&self, a: InstanceId, v: i64) -> Option<SeqNum> {
        self.breaks[a as usize].range(v..).next().map(|(_, &sn)| sn)
    }

    pub fn exec_cursor(&self) -> Option<Pos> {
        self.pending.keys().next().copied()
    }
}

#[derive(Clone, Debug)]
pub struct OrdererConfig {
    pub m: u32,
    pub epoch_len: u64,
    pub abort_grace: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeliverOutcome {
    pub confirmed: Vec<TxDigest>,
    pub aborted: Vec<TxDigest>,
    /// Entries skipped: late deliveries of aborted attempts, duplicates, or
    /// transactions that do not touch this instance.
    pub skipped: Vec<TxDigest>,
    pub delivered: Vec<TxDigest>,
}

#[derive(Clone, Debug)]
pub struct Orderer {
    pub cfg: OrdererConfig,
    pub logs: Vec<InstanceLog>,
    records: BTreeMap<TxDigest, TxRecord>,
    /// Resolved digests whose records were garbage-collected, with the
    /// epoch after which the tombstone may go.
    tombstones: HashMap<TxDigest, (TxStatus, EpochId)>,
}

impl Orderer {
    pub fn new(cfg: OrdererConfig) -> Self {
        let m = cfg.m as usize;
        Orderer {
            logs: (0..cfg.m).map(|i| InstanceLog::new(i, m)).collect(),
            cfg,
            records: BTreeMap::new(),
            tombstones: HashMap::new(),
        }
    }

    pub fn epoch_of(&self, sn: SeqNum) -> EpochId {
        sn / self.cfg.epoch_len
    }

    pub fn epoch_last_sn(&self, e: EpochId) -> SeqNum {
        (e + 1) * self.cfg.epoch_len - 1
    }

    fn deadline(&self, sn: SeqNum) -> SeqNum {
        self.epoch_last_sn(self.epoch_of(sn) + self.cfg.abort_grace)
    }

    pub fn record(&self, d: &TxDigest) -> Option<&TxRecord> {
        self.records.get(d)
    }

    pub fn status(&self, d: &TxDigest) -> Option<TxStatus> {
        self.records
            .get(d)
            .map(|r| r.status)
            .or_else(|| self.tombstones.get(d).map(|t| t.0))
    }

    pub fn retained_records(&self) -> usize {
        self.records.len()
    }

    pub fn state_vector(&self) -> SystemState {
        SystemState {
            frontier: self.logs.iter().map(|l| l.frontier).collect(),
        }
    }

    /// Earliest undispatched entry of log `i` if it is confirmed.
    pub fn first_pending(&self, i: InstanceId) -> Option<TxDigest> {
        let (_, d) = self.logs[i as usize].pending.iter().next()?;
        let rec = &self.records[d];
        rec.tracker.confirmed.then_some(*d)
    }

    /// Head of log `i` regardless of confirmation.
    pub fn head(&self, i: InstanceId) -> Option<TxDigest> {
        self.logs[i as usize].pending.values().next().copied()
    }

    pub fn on_sb_deliver(&mut self, block: &Arc<Block>) -> Result<DeliverOutcome> {
        let ins = block.ins;
        let m = self.cfg.m;
        {
            let log = &self.logs[ins as usize];
            if block.sn as i64 != log.frontier + 1 {
                return Err(HydraError::DuplicateDelivery {
                    instance: ins,
                    sn: block.sn,
                });
            }
        }
        let mut out = DeliverOutcome::default();
        let log = &mut self.logs[ins as usize];
        log.entries.insert(block.sn, block.clone());
        log.frontier = block.sn as i64;
        if block.attest.len() == m as usize {
            for a in 0..m as usize {
                if a != ins as usize && block.attest[a] > log.attest_max[a] {
                    log.attest_max[a] = block.attest[a];
                    log.breaks[a].insert(block.attest[a], block.sn);
                }
            }
        }

        for (off, tx) in block.txs.iter().enumerate() {
            let d = tx.id;
            if self.tombstones.contains_key(&d) {
                out.skipped.push(d);
                continue;
            }
            let instances: BTreeSet<InstanceId> = tx.objects().map(|o| assign(o, m)).collect();
            if !instances.contains(&ins) {
                out.skipped.push(d);
                continue;
            }
            let rec = self.records.entry(d).or_insert_with(|| TxRecord {
                tx: tx.clone(),
                instances,
                pos: BTreeMap::new(),
                tracker: ConfirmationTracker {
                    delivered: vec![false; tx.vertices.len()],
                    confirmed: false,
                },
                status: TxStatus::Pending,
                proposed_at: block.proposed_at_us,
                delivered_last_at: 0,
            });
            if rec.status != TxStatus::Pending || rec.pos.contains_key(&ins) {
                out.skipped.push(d);
                continue;
            }
            let p = Pos::new(block.sn, off as u32);
            rec.pos.insert(ins, p);
            rec.proposed_at = rec.proposed_at.min(block.proposed_at_us);
            for (k, v) in tx.vertices.iter().enumerate() {
                if assign(&v.object, m) == ins {
                    rec.tracker.delivered[k] = true;
                }
            }
            self.logs[ins as usize].pending.insert(p, d);
            out.delivered.push(d);
            if self.doomed(&d) {
                self.abort(&d, AbortKind::Unconfirmed);
                out.aborted.push(d);
                continue;
            }
            let rec = &self.records[&d];
            if rec.fully_delivered() {
                let rec = self.records.get_mut(&d).expect("present");
                rec.tracker.confirmed = true;
                out.confirmed.push(d);
            } else {
                let missing: Vec<_> = rec
                    .instances
                    .iter()
                    .filter(|b| !rec.pos.contains_key(b))
                    .copied()
                    .collect();
                let deadline = self.deadline(p.sn);
                for b in missing {
                    self.logs[b as usize]
                        .waiting
                        .entry((ins, deadline))
                        .or_default()
                        .insert(d);
                }
            }
        }

        // Transactions waiting on this log whose deadline is now attested.
        let mut due = BTreeSet::new();
        let log = &mut self.logs[ins as usize];
        let keys: Vec<_> = log
            .waiting
            .keys()
            .filter(|(a, dl)| log.attest_max[*a as usize] >= *dl as i64)
            .copied()
            .collect();
        for k in keys {
            due.extend(log.waiting.remove(&k).unwrap_or_default());
        }
        for d in due {
            let Some(rec) = self.records.get(&d) else { continue };
            if rec.status == TxStatus::Pending && !rec.pos.contains_key(&ins) {
                self.abort(&d, AbortKind::Unconfirmed);
                out.aborted.push(d);
            }
        }
        Ok(out)
    }

    /// Whether the abort rule already condemns `d` given delivered logs.
    fn doomed(&self, d: &TxDigest) -> bool {
        let rec = &self.records[d];
        for (&a, pa) in &rec.pos {
            let dl = self.deadline(pa.sn) as i64;
            for &b in &rec.instances {
                if b == a {
                    continue;
                }
                if let Some(star) = self.logs[b as usize].first_attesting(a, dl) {
                    match rec.pos.get(&b) {
                        None => return true,
                        Some(pb) if pb.sn > star => return true,
                        _ => {}
                    }
                }
            }
        }
        false
    }

    /// Marks `d` aborted and removes it from every log's pending set.
    pub fn abort(&mut self, d: &TxDigest, kind: AbortKind) {
        let Some(rec) = self.records.get_mut(d) else { return };
        rec.status = TxStatus::Aborted(kind);
        for (&i, p) in &rec.pos {
            self.logs[i as usize].pending.remove(p);
        }
    }

    /// The cursor of every involved instance passes `d`.
    pub fn mark_dispatched(&mut self, d: &TxDigest) {
        let rec = self.records.get_mut(d).expect("dispatching unknown tx");
        rec.status = TxStatus::Dispatched;
        for (&i, p) in &rec.pos {
            self.logs[i as usize].pending.remove(p);
        }
    }

    pub fn mark_executed(&mut self, d: &TxDigest, success: bool) {
        if let Some(rec) = self.records.get_mut(d) {
            rec.status = TxStatus::Executed { success };
        }
    }

    pub fn set_delivered_at(&mut self, d: &TxDigest, t: u64) {
        if let Some(rec) = self.records.get_mut(d) {
            rec.delivered_last_at = t;
        }
    }

    /// Pending entries of log `i` strictly before `p`.
    pub fn pending_before(&self, i: InstanceId, p: Pos) -> impl DoubleEndedIterator<Item = (&Pos, &TxDigest)> {
        self.logs[i as usize].pending.range(..p)
    }

    pub fn pending_after(&self, i: InstanceId, p: Pos) -> impl Iterator<Item = (&Pos, &TxDigest)> {
        use std::ops::Bound::{Excluded, Unbounded};
        self.logs[i as usize].pending.range((Excluded(p), Unbounded))
    }

    /// True when every instance has delivered through the last sn of epoch
    /// `e` and no transaction positioned at or below that sn is unresolved.
    pub fn cut_resolved(&self, e: EpochId, in_flight: impl Fn(&TxDigest) -> bool) -> bool {
        let cut = self.epoch_last_sn(e);
        for log in &self.logs {
            if log.frontier < cut as i64 {
                return false;
            }
            if log.pending.keys().next().is_some_and(|p| p.sn <= cut) {
                return false;
            }
        }
        for (d, rec) in &self.records {
            if rec.status == TxStatus::Dispatched && rec.pos.values().any(|p| p.sn <= cut) && in_flight(d) {
                return false;
            }
        }
        true
    }

    /// Block digests of epoch `e` for every instance, in instance order.
    pub fn epoch_blocks(&self, e: EpochId) -> Vec<[u8; 32]> {
        let lo = e * self.cfg.epoch_len;
        let hi = self.epoch_last_sn(e);
        let mut out = Vec::new();
        for log in &self.logs {
            for (_, b) in log.entries.range(lo..=hi) {
                out.push(b.body_digest());
            }
        }
        out
    }

    /// Drops blocks and resolved records at or below the cut of epoch `e`.
    /// Returns the digests forgotten, for dedup pruning.
    pub fn gc(&mut self, e: EpochId) -> Vec<TxDigest> {
        let cut = self.epoch_last_sn(e);
        for log in &mut self.logs {
            log.entries = log.entries.split_off(&(cut + 1));
            for br in &mut log.breaks {
                // Keep the last breakpoint at or below the cut: it still
                // answers "first sn reaching v" correctly for v above it.
                let tail = br.iter().filter(|(_, &sn)| sn <= cut).map(|(&v, &sn)| (v, sn)).next_back();
                br.retain(|_, sn| *sn > cut);
                if let Some((v, sn)) = tail {
                    br.insert(v, sn);
                }
            }
        }
        let mut gone: Vec<(TxDigest, TxStatus)> = Vec::new();
        self.records.retain(|d, rec| {
            let below = rec.pos.values().all(|p| p.sn <= cut);
            if rec.status.is_resolved() && below {
                gone.push((*d, rec.status));
                false
            } else {
                true
            }
        });
        gone.sort_by_key(|(d, _)| *d);
        self.tombstones.retain(|_, (_, until)| *until > e);
        for (d, st) in &gone {
            self.tombstones.insert(*d, (*st, e + 2));
        }
        gone.into_iter().map(|(d, _)| d).collect()
    }

    pub fn records_iter(&self) -> impl Iterator<Item = (&TxDigest, &TxRecord)> {
        self.records.iter()
    }
}
