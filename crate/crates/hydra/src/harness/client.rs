//! The load generator: submits to every replica and completes a request at
//! the f+1-th matching reply, following retries across aborts.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::exec::{ClientReply, ReplyStatus};
use crate::harness::metrics::{TxOutcome, TxTimeline};
use crate::model::{ReplicaId, TransactionDag, TxDigest};
use crate::replica::{Msg, Net, ReplicaParams, Timer};
use crate::simnet::{NodeId, SimTime};

pub struct Client {
    pub node: NodeId,
    n: u32,
    quorum: usize,
    submit_cost: SimTime,
    txs: Vec<Arc<TransactionDag>>,
    next: usize,
    interval: SimTime,
    max_inflight: usize,
    inflight: usize,
    alias: HashMap<TxDigest, usize>,
    votes: HashMap<(TxDigest, bool), BTreeSet<ReplicaId>>,
    submitted_at: Vec<SimTime>,
    attempts: Vec<u32>,
    outcomes: Vec<Option<TxOutcome>>,
    completed: usize,
}

impl Client {
    /// `rate` is requests per second for the open loop; `max_inflight > 0`
    /// selects a closed loop instead.
    pub fn new(p: &ReplicaParams, txs: Vec<Arc<TransactionDag>>, rate: f64, max_inflight: usize) -> Self {
        let count = txs.len();
        Client {
            node: p.client,
            n: p.n,
            quorum: p.f as usize + 1,
            submit_cost: p.proc_msg + p.proc_tx,
            interval: if rate > 0.0 { (1e6 / rate).round().max(1.0) as SimTime } else { 1 },
            txs,
            next: 0,
            max_inflight,
            inflight: 0,
            alias: HashMap::new(),
            votes: HashMap::new(),
            submitted_at: vec![0; count],
            attempts: vec![1; count],
            outcomes: vec![None; count],
            completed: 0,
        }
    }

    pub fn start(&mut self, net: &mut Net) {
        if self.max_inflight > 0 {
            while self.inflight < self.max_inflight && self.next < self.txs.len() {
                self.submit_next(net);
            }
        } else if !self.txs.is_empty() {
            net.set_timer(self.node, 0, Timer::Client);
        }
    }

    fn submit_next(&mut self, net: &mut Net) {
        let idx = self.next;
        self.next += 1;
        self.inflight += 1;
        let tx = self.txs[idx].clone();
        self.alias.insert(tx.id, idx);
        self.submitted_at[idx] = net.now();
        for r in 0..self.n {
            net.send(self.node, r, Msg::Submit(tx.clone()), self.submit_cost);
        }
    }

    pub fn on_timer(&mut self, net: &mut Net) {
        if self.next < self.txs.len() {
            self.submit_next(net);
        }
        if self.next < self.txs.len() {
            net.set_timer(self.node, self.interval, Timer::Client);
        }
    }

    pub fn on_reply(&mut self, net: &mut Net, r: ClientReply) {
        let Some(&idx) = self.alias.get(&r.tx_id) else { return };
        if self.outcomes[idx].is_some() {
            return;
        }
        let success = match r.status {
            ReplyStatus::Aborted => {
                if let Some(next) = r.retry {
                    if self.alias.insert(next, idx).is_none() {
                        self.attempts[idx] += 1;
                    }
                }
                return;
            }
            ReplyStatus::Success => true,
            ReplyStatus::Failure => false,
        };
        let voters = self.votes.entry((r.tx_id, success)).or_default();
        voters.insert(r.replica);
        if voters.len() < self.quorum {
            return;
        }
        let t = r.timeline;
        self.outcomes[idx] = Some(TxOutcome {
            index: idx,
            success,
            attempts: self.attempts[idx],
            timeline: TxTimeline {
                submitted: self.submitted_at[idx],
                proposed: t.proposed_at,
                delivered: t.delivered_at,
                exec_start: t.exec_start,
                executed: t.executed_at,
                replied: net.now(),
            },
        });
        self.completed += 1;
        self.inflight -= 1;
        if self.max_inflight > 0 && self.next < self.txs.len() {
            self.submit_next(net);
        }
    }

    pub fn finished(&self) -> bool {
        self.completed == self.txs.len()
    }

    pub fn submitted(&self) -> usize {
        self.next
    }

    pub fn outcomes(&self) -> Vec<TxOutcome> {
        self.outcomes.iter().flatten().cloned().collect()
    }
}
