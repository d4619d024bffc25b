//! Pre-determined global ordering baseline: slot `g = sn * m + ins`, consumed
//! in order and executed serially without locks.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::Arc;

use crate::exec::{execute_tx, ExecOutcome, Store};
use crate::model::{Block, InstanceId, SeqNum, TransactionDag, TxDigest};
use crate::orderer::Pos;

pub fn global_index(m: u32, ins: InstanceId, sn: SeqNum) -> u64 {
    sn * m as u64 + ins as u64
}

pub fn slot_of(m: u32, g: u64) -> (InstanceId, SeqNum) {
    ((g % m as u64) as InstanceId, g / m as u64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GlobalStep {
    Executed(Arc<Block>),
    WaitingGap,
}

#[derive(Clone, Debug)]
pub struct GlobalLog {
    pub m: u32,
    slots: BTreeMap<u64, (Arc<Block>, u64)>,
    pub cursor: u64,
}

impl GlobalLog {
    pub fn new(m: u32) -> Self {
        GlobalLog {
            m,
            slots: BTreeMap::new(),
            cursor: 0,
        }
    }

    pub fn insert(&mut self, block: Arc<Block>, delivered_at: u64) {
        let g = global_index(self.m, block.ins, block.sn);
        if g >= self.cursor {
            self.slots.insert(g, (block, delivered_at));
        }
    }

    /// Takes the block at the cursor if its slot is filled.
    pub fn execute_next_global(&mut self) -> GlobalStep {
        match self.take_next() {
            Some((b, _)) => GlobalStep::Executed(b),
            None => GlobalStep::WaitingGap,
        }
    }

    fn take_next(&mut self) -> Option<(Arc<Block>, u64)> {
        let entry = self.slots.remove(&self.cursor)?;
        self.cursor += 1;
        Some(entry)
    }

    pub fn buffered(&self) -> usize {
        self.slots.len()
    }
}

#[derive(Clone, Debug)]
pub struct QueuedTx {
    pub tx: Arc<TransactionDag>,
    pub pos: Pos,
    pub ins: InstanceId,
    pub delivered_at: u64,
    pub proposed_at: u64,
}

/// One replica's serial executor in baseline mode.
#[derive(Clone, Debug)]
pub struct IssExecutor {
    pub log: GlobalLog,
    pub store: Store,
    queue: VecDeque<QueuedTx>,
    running: Option<(QueuedTx, u64)>,
    executed: HashSet<TxDigest>,
    pub epoch_len: u64,
    pub closed_epochs: u64,
}

#[derive(Clone, Debug)]
pub enum IssStep {
    Start(QueuedTx),
    WaitingGap,
    Busy,
    /// The cursor sits at an epoch boundary; call `newly_closed` first.
    EpochBoundary,
}

impl IssExecutor {
    pub fn new(m: u32, epoch_len: u64, initial_balance: i64) -> Self {
        IssExecutor {
            log: GlobalLog::new(m),
            store: Store::new(initial_balance),
            queue: VecDeque::new(),
            running: None,
            executed: HashSet::new(),
            epoch_len,
            closed_epochs: 0,
        }
    }

    pub fn deliver(&mut self, block: Arc<Block>, now: u64) {
        self.log.insert(block, now);
    }

    /// Starts the next transaction in global order, pulling blocks as needed.
    pub fn step(&mut self, now: u64) -> IssStep {
        if self.running.is_some() {
            return IssStep::Busy;
        }
        loop {
            while let Some(q) = self.queue.pop_front() {
                if self.executed.insert(q.tx.id) {
                    self.running = Some((q.clone(), now));
                    return IssStep::Start(q);
                }
            }
            if self.log.cursor >= self.epoch_end(self.closed_epochs) {
                return IssStep::EpochBoundary;
            }
            match self.log.take_next() {
                Some((b, at)) => {
                    for (off, tx) in b.txs.iter().enumerate() {
                        self.queue.push_back(QueuedTx {
                            tx: tx.clone(),
                            pos: Pos::new(b.sn, off as u32),
                            ins: b.ins,
                            delivered_at: at,
                            proposed_at: b.proposed_at_us,
                        });
                    }
                }
                None => return IssStep::WaitingGap,
            }
        }
    }

    /// Finishes the running transaction and applies its effects.
    pub fn complete(&mut self) -> (QueuedTx, u64, ExecOutcome) {
        let (q, started) = self.running.take().expect("nothing running");
        let out = execute_tx(&self.store, &q.tx);
        for (o, v) in &out.writes {
            self.store.set(o, *v, None);
        }
        (q, started, out)
    }

    /// Epochs whose global range has been fully consumed and executed and
    /// not yet reported. The store digest is taken at that exact point.
    pub fn newly_closed(&mut self) -> Option<u64> {
        if self.running.is_some() || !self.queue.is_empty() {
            return None;
        }
        let e = self.closed_epochs;
        if self.log.cursor >= self.epoch_end(e) {
            self.closed_epochs += 1;
            Some(e)
        } else {
            None
        }
    }

    fn epoch_end(&self, e: u64) -> u64 {
        global_index(self.log.m, 0, (e + 1) * self.epoch_len)
    }

    pub fn forget_executed(&mut self, ids: impl IntoIterator<Item = TxDigest>) {
        for d in ids {
            self.executed.remove(&d);
        }
    }

    pub fn executed_len(&self) -> usize {
        self.executed.len()
    }
}
