//! One replica: SB instances, buckets, orderer and executor (or the global
//! log in baseline mode) driven by simulated network events.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::checkpoint::{checkpoint_digest, CheckpointMsg, CheckpointTracker};
use crate::deadlock::{abort_one, cut_deadlock_group, select_victims};
use crate::exec::{ClientReply, ExecEngine, ReplyStatus, ReplyTimeline};
use crate::harness::config::{Mode, ScenarioConfig};
use crate::iss::{IssExecutor, IssStep};
use crate::model::{
    Authenticator, Block, EpochId, InstanceId, Keyring, Party, ReplicaId, SeqNum, SystemState, TransactionDag,
    TxDigest, NONE_SN,
};
use crate::orderer::{AbortKind, Orderer, OrdererConfig, Pos};
use crate::partitioner::Partitioner;
use crate::sb::{SbAction, SbConfig, SbInstance, SbMsg};
use crate::simnet::{ms, NodeId, SimNet, SimTime, TraceLabel};

pub type Net = SimNet<Msg, Timer>;

#[derive(Clone, Debug)]
pub enum Msg {
    Submit(Arc<TransactionDag>),
    Sb(SbMsg),
    /// Simulator-ordained delivery, bypassing agreement.
    Ideal(Arc<Block>),
    Checkpoint(CheckpointMsg),
    Reply(ClientReply),
}

impl TraceLabel for Msg {
    fn trace_label(&self) -> String {
        match self {
            Msg::Submit(tx) => format!("submit {}", tx.id.short()),
            Msg::Sb(m) => {
                let kind = match m {
                    SbMsg::PrePrepare(p) => format!("pp v{} sn{}", p.view, p.sn),
                    SbMsg::Vote(v) => format!("{:?} v{} sn{} r{}", v.kind, v.view, v.sn, v.replica),
                    SbMsg::ViewChange(v) => format!("vc v{} r{}", v.new_view, v.replica),
                    SbMsg::NewView(v) => format!("nv v{} resume{}", v.view, v.resume_sn),
                };
                format!("sb i{} {kind}", m.instance())
            }
            Msg::Ideal(b) => format!("ideal i{} sn{}", b.ins, b.sn),
            Msg::Checkpoint(c) => format!("ckpt e{} r{}", c.epoch, c.replica),
            Msg::Reply(r) => format!("reply {} {:?} r{}", r.tx_id.short(), r.status, r.replica),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Timer {
    Batch(InstanceId),
    View { ins: InstanceId, marker: (u64, u64) },
    Exec(TxDigest),
    IssExec,
    Client,
}

impl TraceLabel for Timer {
    fn trace_label(&self) -> String {
        match self {
            Timer::Batch(i) => format!("batch i{i}"),
            Timer::View { ins, marker } => format!("view i{ins} {}/{}", marker.0, marker.1),
            Timer::Exec(d) => format!("exec {}", d.short()),
            Timer::IssExec => "iss-exec".into(),
            Timer::Client => "client".into(),
        }
    }
}

/// Replica-side parameters in simulator units.
#[derive(Clone, Debug)]
pub struct ReplicaParams {
    pub n: u32,
    pub f: u32,
    pub m: u32,
    pub mode: Mode,
    pub ideal_sb: bool,
    pub batch_size: usize,
    pub batch_timeout: SimTime,
    pub view_timeout: SimTime,
    pub epoch_len: u64,
    pub abort_grace: u64,
    pub slots: usize,
    pub vertex_cost: SimTime,
    pub proc_msg: SimTime,
    pub proc_tx: SimTime,
    pub initial_balance: i64,
    /// Leaders keep cutting blocks until this many epochs are complete.
    pub min_epochs: u64,
    pub record_history: bool,
    pub client: NodeId,
}

impl ReplicaParams {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        ReplicaParams {
            n: cfg.n,
            f: cfg.f(),
            m: cfg.m(),
            mode: cfg.mode,
            ideal_sb: cfg.protocol.ideal_sb,
            batch_size: cfg.protocol.batch_size,
            batch_timeout: ms(cfg.protocol.batch_timeout_ms),
            view_timeout: ms(cfg.view_timeout_ms()),
            epoch_len: cfg.protocol.epoch_len,
            abort_grace: cfg.protocol.abort_grace,
            slots: cfg.execution.slots,
            vertex_cost: ms(cfg.execution.vertex_cost_ms),
            proc_msg: ms(cfg.execution.proc_msg_ms),
            proc_tx: ms(cfg.execution.proc_tx_ms),
            initial_balance: cfg.execution.initial_balance,
            min_epochs: cfg.protocol.min_epochs,
            record_history: cfg.record_history,
            client: cfg.n,
        }
    }

    /// Receiver-side processing cost of a message.
    pub fn cost(&self, msg: &Msg) -> SimTime {
        let txs = match msg {
            Msg::Submit(_) => 1,
            Msg::Sb(m) => m.tx_count(),
            Msg::Ideal(b) => b.txs.len(),
            Msg::Checkpoint(_) | Msg::Reply(_) => 0,
        };
        self.proc_msg + self.proc_tx * txs as SimTime
    }

    fn epoch_last_sn(&self, e: EpochId) -> SeqNum {
        (e + 1) * self.epoch_len - 1
    }
}

/// An executed transaction as seen by one replica.
#[derive(Clone, Debug)]
pub struct Committed {
    pub tx: Arc<TransactionDag>,
    pub pos: BTreeMap<InstanceId, Pos>,
    pub success: bool,
    pub started: SimTime,
    pub finished: SimTime,
}

/// State pinned by a replica when it closes an epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochSnapshot {
    pub epoch: EpochId,
    pub state: SystemState,
    pub store: [u8; 32],
    pub checkpoint: [u8; 32],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplicaStats {
    pub unconfirmed_aborts: u64,
    pub victim_aborts: u64,
    pub deadlocks: u64,
    pub view_changes: u64,
    pub suspicions: u64,
    /// When this replica first suspected a leader, and first installed a new view.
    pub first_suspicion_at: Option<SimTime>,
    pub first_view_installed_at: Option<SimTime>,
    pub rejected: u64,
    pub executed: u64,
    pub proposed_blocks: u64,
}

pub struct Replica {
    pub id: ReplicaId,
    pub p: ReplicaParams,
    keys: Keyring,
    sb: Vec<SbInstance>,
    ideal_buf: Vec<BTreeMap<SeqNum, Arc<Block>>>,
    ideal_next: Vec<SeqNum>,
    ideal_proposed: Vec<SeqNum>,
    pub part: Partitioner,
    pub ord: Orderer,
    pub exec: ExecEngine,
    pub iss: IssExecutor,
    ckpt: CheckpointTracker,
    inflight: Vec<Vec<Arc<TransactionDag>>>,
    batch_armed: Vec<bool>,
    view_armed: Vec<bool>,
    frontier: Vec<i64>,
    block_digests: Vec<BTreeMap<SeqNum, [u8; 32]>>,
    iss_running: Option<SimTime>,
    iss_epoch_ids: BTreeMap<EpochId, Vec<TxDigest>>,
    /// Next epoch whose cut gets a deadlock check.
    /// Next log position at which to run the deadlock check.
    next_check_sn: SeqNum,
    /// Next epoch to close locally.
    next_close: EpochId,
    /// Next epoch to garbage-collect.
    next_gc: EpochId,
    pub history: Vec<Committed>,
    pub snapshots: BTreeMap<EpochId, EpochSnapshot>,
    pub stable: BTreeMap<EpochId, [u8; 32]>,
    /// Records still referencing an epoch right after it was collected.
    pub retained_after_gc: BTreeMap<EpochId, usize>,
    pub stats: ReplicaStats,
}

fn placeholder_sig() -> Authenticator {
    Authenticator {
        signer: Party::Replica(0),
        tag: [0; 32],
    }
}

impl Replica {
    pub fn new(id: ReplicaId, p: ReplicaParams, keys: Keyring) -> Self {
        let m = p.m as usize;
        let sb = (0..p.m)
            .map(|i| {
                SbInstance::new(
                    SbConfig {
                        instance: i,
                        n: p.n,
                        f: p.f,
                        view_timeout_us: p.view_timeout,
                    },
                    id,
                    keys.clone(),
                )
            })
            .collect();
        Replica {
            id,
            sb,
            ideal_buf: vec![BTreeMap::new(); m],
            ideal_next: vec![0; m],
            ideal_proposed: vec![0; m],
            part: Partitioner::new(p.m),
            ord: Orderer::new(OrdererConfig {
                m: p.m,
                epoch_len: p.epoch_len,
                abort_grace: p.abort_grace,
            }),
            exec: ExecEngine::new(p.m, p.slots, p.initial_balance),
            iss: IssExecutor::new(p.m, p.epoch_len, p.initial_balance),
            ckpt: CheckpointTracker::new(id, p.n, p.f, keys.clone()),
            keys,
            inflight: vec![Vec::new(); m],
            batch_armed: vec![false; m],
            view_armed: vec![false; m],
            frontier: vec![NONE_SN; m],
            block_digests: vec![BTreeMap::new(); m],
            iss_running: None,
            iss_epoch_ids: BTreeMap::new(),
            next_check_sn: 0,
            next_close: 0,
            next_gc: 0,
            history: Vec::new(),
            snapshots: BTreeMap::new(),
            stable: BTreeMap::new(),
            retained_after_gc: BTreeMap::new(),
            stats: ReplicaStats::default(),
            p,
        }
    }

    pub fn frontier(&self) -> &[i64] {
        &self.frontier
    }

    pub fn sb(&self, i: InstanceId) -> &SbInstance {
        &self.sb[i as usize]
    }

    /// Highest epoch any local log has entered.
    pub fn max_epoch(&self) -> Option<EpochId> {
        let top = *self.frontier.iter().max()?;
        (top >= 0).then(|| top as u64 / self.p.epoch_len)
    }

    pub fn closed_epochs(&self) -> EpochId {
        self.next_close
    }

    pub fn collected_epochs(&self) -> EpochId {
        self.next_gc
    }

    fn leads(&self, i: InstanceId) -> bool {
        if self.p.ideal_sb {
            i % self.p.n == self.id
        } else {
            self.sb[i as usize].is_leader()
        }
    }

    fn ready_to_propose(&self, i: InstanceId) -> bool {
        if self.p.ideal_sb {
            self.leads(i) && self.ideal_proposed[i as usize] == self.ideal_next[i as usize]
        } else {
            self.sb[i as usize].ready_to_propose()
        }
    }

    /// Whether instance `i` has to keep moving: queued requests, an epoch
    /// another log already entered, or the configured minimum run length.
    fn instance_needs_progress(&self, i: InstanceId) -> bool {
        if !self.part.bucket(i).is_empty() {
            return true;
        }
        let own = self.frontier[i as usize];
        if self.p.min_epochs > 0 && own < self.p.epoch_last_sn(self.p.min_epochs - 1) as i64 {
            return true;
        }
        match self.max_epoch() {
            Some(e) => own < self.p.epoch_last_sn(e) as i64,
            None => false,
        }
    }

    /// Work anywhere on this replica that other logs' progress may resolve
    /// (abort deadlines, global-order gaps).
    fn outstanding_work(&self) -> bool {
        match self.p.mode {
            Mode::Hydra => self.ord.logs.iter().any(|l| !l.pending.is_empty()),
            Mode::Iss => self.iss.log.buffered() > 0,
        }
    }

    fn broadcast(&self, net: &mut Net, msg: Msg) {
        let cost = self.p.cost(&msg);
        for r in 0..self.p.n {
            net.send(self.id, r, msg.clone(), cost);
        }
    }

    fn reply(&self, net: &mut Net, tx_id: TxDigest, status: ReplyStatus, retry: Option<TxDigest>, tl: ReplyTimeline) {
        let r = ClientReply {
            tx_id,
            status,
            replica: self.id,
            at_us: net.now(),
            retry,
            timeline: tl,
        };
        net.send(self.id, self.p.client, Msg::Reply(r), 0);
    }

    /// Arms the batch timer of every instance this replica leads.
    fn arm_batches(&mut self, net: &mut Net) {
        for i in 0..self.p.m {
            self.arm_batch(net, i);
        }
    }

    fn arm_batch(&mut self, net: &mut Net, i: InstanceId) {
        if self.batch_armed[i as usize] || !self.ready_to_propose(i) {
            return;
        }
        if !(self.instance_needs_progress(i) || self.outstanding_work()) {
            return;
        }
        self.batch_armed[i as usize] = true;
        let after = net.scaled(self.id, self.p.batch_timeout);
        net.set_timer(self.id, after, Timer::Batch(i));
    }

    fn arm_view(&mut self, net: &mut Net, i: InstanceId) {
        if self.p.ideal_sb || self.view_armed[i as usize] {
            return;
        }
        let sb = &self.sb[i as usize];
        if !(sb.in_view_change() || self.instance_needs_progress(i)) {
            return;
        }
        self.view_armed[i as usize] = true;
        let marker = sb.progress_marker();
        net.set_timer(self.id, sb.current_timeout_us(), Timer::View { ins: i, marker });
    }

    pub fn on_message(&mut self, net: &mut Net, from: NodeId, msg: Msg) {
        match msg {
            Msg::Submit(tx) => self.on_submit(net, tx),
            Msg::Sb(m) => {
                let i = m.instance();
                if i >= self.p.m || from >= self.p.n {
                    self.stats.rejected += 1;
                    return;
                }
                match self.sb[i as usize].on_sb_message(from, m) {
                    Ok(actions) => self.apply_sb(net, i, actions),
                    Err(_) => self.stats.rejected += 1,
                }
            }
            Msg::Ideal(b) => {
                let i = b.ins as usize;
                if i >= self.p.m as usize || !b.verify(&self.keys) {
                    self.stats.rejected += 1;
                    return;
                }
                self.ideal_buf[i].insert(b.sn, b);
                while let Some(b) = self.ideal_buf[i].remove(&self.ideal_next[i]) {
                    self.ideal_next[i] += 1;
                    self.deliver_block(net, b);
                }
            }
            Msg::Checkpoint(c) => self.on_checkpoint(net, c),
            Msg::Reply(_) => {}
        }
    }

    pub fn on_timer(&mut self, net: &mut Net, timer: Timer) {
        match timer {
            Timer::Batch(i) => {
                self.batch_armed[i as usize] = false;
                self.propose(net, i);
            }
            Timer::View { ins, marker } => {
                self.view_armed[ins as usize] = false;
                let sb = &self.sb[ins as usize];
                let stuck = sb.progress_marker() == marker && (sb.in_view_change() || self.instance_needs_progress(ins));
                if stuck {
                    self.stats.suspicions += 1;
                    self.stats.first_suspicion_at.get_or_insert(net.now());
                    let actions = self.sb[ins as usize].suspect_and_view_change();
                    self.apply_sb(net, ins, actions);
                }
                self.arm_view(net, ins);
            }
            Timer::Exec(d) => self.finish_exec(net, d),
            Timer::IssExec => self.finish_iss(net),
            Timer::Client => {}
        }
    }

    fn on_submit(&mut self, net: &mut Net, tx: Arc<TransactionDag>) {
        let routed = match self.p.mode {
            Mode::Hydra => self.part.route_tx(tx, &self.keys),
            Mode::Iss => {
                if crate::model::validate_tx(&tx, &self.keys) {
                    let i = iss_bucket(&tx.id, self.p.m);
                    self.part.route_to(tx, BTreeSet::from([i]), false)
                } else {
                    self.part.invalid += 1;
                    Err(crate::HydraError::InvalidTx)
                }
            }
        };
        match routed {
            Ok(r) if r.added => {
                for i in r.instances {
                    self.arm_batch(net, i);
                    self.arm_view(net, i);
                }
            }
            Ok(_) => {}
            Err(_) => self.stats.rejected += 1,
        }
    }

    fn propose(&mut self, net: &mut Net, i: InstanceId) {
        if !self.ready_to_propose(i) || !(self.instance_needs_progress(i) || self.outstanding_work()) {
            return;
        }
        let txs = self.part.pull_valid_tx(i, self.p.batch_size);
        let sn = if self.p.ideal_sb {
            self.ideal_proposed[i as usize]
        } else {
            self.sb[i as usize].next_sn()
        };
        let block = Block {
            txs: txs.clone(),
            ins: i,
            sn,
            attest: self.frontier.clone(),
            sig: placeholder_sig(),
            proposed_at_us: net.now(),
        };
        self.inflight[i as usize].extend(txs);
        self.stats.proposed_blocks += 1;
        if self.p.ideal_sb {
            self.ideal_proposed[i as usize] += 1;
            let block = Arc::new(block.sign(&self.keys, self.id));
            self.broadcast(net, Msg::Ideal(block));
            return;
        }
        match self.sb[i as usize].sb_broadcast(block) {
            Ok(actions) => self.apply_sb(net, i, actions),
            Err(_) => self.stats.rejected += 1,
        }
    }

    fn apply_sb(&mut self, net: &mut Net, i: InstanceId, actions: Vec<SbAction>) {
        for a in actions {
            match a {
                SbAction::Broadcast(m) => self.broadcast(net, Msg::Sb(m)),
                SbAction::Deliver(b) => self.deliver_block(net, b),
                SbAction::Installed { .. } => {
                    self.stats.view_changes += 1;
                    self.stats.first_view_installed_at.get_or_insert(net.now());
                    let lost = std::mem::take(&mut self.inflight[i as usize]);
                    self.part.restore_front(i, lost.into_iter());
                    self.arm_batch(net, i);
                }
                SbAction::Suspect { .. } => {
                    self.stats.suspicions += 1;
                    self.stats.first_suspicion_at.get_or_insert(net.now());
                    let more = self.sb[i as usize].suspect_and_view_change();
                    self.apply_sb(net, i, more);
                }
            }
        }
        self.arm_view(net, i);
    }

    /// Hands a delivered block to the orderer (or the global log).
    pub fn deliver_block(&mut self, net: &mut Net, block: Arc<Block>) {
        let i = block.ins;
        self.frontier[i as usize] = self.frontier[i as usize].max(block.sn as i64);
        self.block_digests[i as usize].insert(block.sn, block.body_digest());
        let ids: BTreeSet<TxDigest> = block.txs.iter().map(|t| t.id).collect();
        self.inflight[i as usize].retain(|t| !ids.contains(&t.id));
        for d in &ids {
            self.part.bucket_mut(i).remove(d);
        }
        match self.p.mode {
            Mode::Hydra => self.deliver_hydra(net, &block),
            Mode::Iss => {
                self.iss.deliver(block, net.now());
                self.pump_iss(net);
            }
        }
        self.arm_batches(net);
    }

    fn deliver_hydra(&mut self, net: &mut Net, block: &Arc<Block>) {
        let out = match self.ord.on_sb_deliver(block) {
            Ok(o) => o,
            Err(_) => {
                self.stats.rejected += 1;
                return;
            }
        };
        let now = net.now();
        for d in &out.delivered {
            self.ord.set_delivered_at(d, now);
        }
        for d in &out.aborted {
            self.stats.unconfirmed_aborts += 1;
            self.abort(net, d, AbortKind::Unconfirmed);
        }
        self.pump(net);
        self.progress_epochs(net);
    }

    fn abort(&mut self, net: &mut Net, d: &TxDigest, kind: AbortKind) {
        let tl = self.ord.record(d).map(|r| ReplyTimeline {
            proposed_at: r.proposed_at,
            delivered_at: r.delivered_last_at,
            exec_start: 0,
            executed_at: 0,
        });
        if let Some(a) = abort_one(&mut self.ord, &mut self.exec, &mut self.part, d, kind) {
            self.reply(net, a.id, ReplyStatus::Aborted, Some(a.retry.id), tl.unwrap_or_default());
            for i in crate::partitioner::instances_of(&a.retry, self.p.m) {
                self.arm_batch(net, i);
            }
        }
    }

    /// Runs the lock/dispatch loop until nothing more can start.
    fn pump(&mut self, net: &mut Net) {
        let now = net.now();
        loop {
            let mut started = Vec::new();
            for i in 0..self.p.m {
                while let crate::exec::Advance::Dispatched(d) = self.exec.try_advance(&mut self.ord, i, now) {
                    started.push(d);
                }
            }
            started.extend(self.exec.dispatch_ready(&mut self.ord, now));
            if started.is_empty() {
                break;
            }
            for d in started {
                let vertices = self.ord.record(&d).map_or(0, |r| r.tx.vertices.len()) as SimTime;
                let after = net.scaled(self.id, self.p.vertex_cost * vertices);
                net.set_timer(self.id, after, Timer::Exec(d));
            }
        }
    }

    fn finish_exec(&mut self, net: &mut Net, d: TxDigest) {
        let Some(started) = self.exec.exec_start(&d) else { return };
        let (out, _) = self.exec.complete(&mut self.ord, &d);
        self.stats.executed += 1;
        let rec = self.ord.record(&d).expect("executed tx has a record");
        let tl = ReplyTimeline {
            proposed_at: rec.proposed_at,
            delivered_at: rec.delivered_last_at,
            exec_start: started,
            executed_at: net.now(),
        };
        if self.p.record_history {
            self.history.push(Committed {
                tx: rec.tx.clone(),
                pos: rec.pos.clone(),
                success: out.success,
                started,
                finished: net.now(),
            });
        }
        let status = if out.success { ReplyStatus::Success } else { ReplyStatus::Failure };
        self.reply(net, d, status, None, tl);
        self.pump(net);
        self.progress_epochs(net);
        self.arm_batches(net);
    }

    /// Deadlock checks at every position all logs have delivered, then
    /// local epoch closes.
    fn progress_epochs(&mut self, net: &mut Net) {
        loop {
            let cut = self.next_check_sn;
            if self.frontier.iter().any(|&f| f < cut as i64) {
                break;
            }
            self.next_check_sn += 1;
            let group = cut_deadlock_group(&self.ord, cut);
            let victims = select_victims(&group);
            if !victims.is_empty() {
                self.stats.deadlocks += 1;
                for v in &victims {
                    self.stats.victim_aborts += 1;
                    self.abort(net, v, AbortKind::Victim);
                }
                self.pump(net);
            }
        }
        while self.p.epoch_last_sn(self.next_close) < self.next_check_sn {
            let e = self.next_close;
            let exec = &self.exec;
            if !self.ord.cut_resolved(e, |d| exec.is_running(d)) {
                break;
            }
            let cut = self.p.epoch_last_sn(e);
            let store = self.exec.store.cut_digest(cut);
            self.close_epoch(net, e, store);
        }
    }

    fn close_epoch(&mut self, net: &mut Net, e: EpochId, store: [u8; 32]) {
        let cut = self.p.epoch_last_sn(e) as i64;
        let state = SystemState {
            frontier: vec![cut; self.p.m as usize],
        };
        let lo = e * self.p.epoch_len;
        let blocks: Vec<[u8; 32]> = self
            .block_digests
            .iter()
            .flat_map(|l| l.range(lo..=cut as u64).map(|(_, d)| *d))
            .collect();
        let digest = checkpoint_digest(e, &state, &blocks, &store);
        self.snapshots.insert(
            e,
            EpochSnapshot {
                epoch: e,
                state,
                store,
                checkpoint: digest,
            },
        );
        self.next_close = e + 1;
        let msg = self.ckpt.emit_checkpoint(e, true, digest).expect("closed epoch");
        self.broadcast(net, Msg::Checkpoint(msg));
        self.collect_garbage();
    }

    fn on_checkpoint(&mut self, _net: &mut Net, c: CheckpointMsg) {
        match self.ckpt.on_checkpoint_msg(c) {
            Ok(Some(stable)) => {
                self.stable.insert(stable.epoch, stable.digest);
                self.collect_garbage();
            }
            Ok(None) => {}
            Err(_) => self.stats.rejected += 1,
        }
    }

    /// Collects every epoch that is both stable and closed locally.
    fn collect_garbage(&mut self) {
        while self.next_gc < self.next_close && self.stable.contains_key(&self.next_gc) {
            let e = self.next_gc;
            let cut = self.p.epoch_last_sn(e);
            let gone = match self.p.mode {
                Mode::Hydra => {
                    let gone = self.ord.gc(e);
                    self.exec.store.gc_history(cut);
                    gone
                }
                Mode::Iss => {
                    let ids: Vec<TxDigest> = self
                        .iss_epoch_ids
                        .range(..=e)
                        .flat_map(|(_, v)| v.iter().copied())
                        .collect();
                    self.iss_epoch_ids = self.iss_epoch_ids.split_off(&(e + 1));
                    self.iss.forget_executed(ids.iter().copied());
                    ids
                }
            };
            self.part.forget(gone);
            for sb in &mut self.sb {
                sb.prune_below(cut + 1);
            }
            for l in &mut self.block_digests {
                *l = l.split_off(&(cut + 1));
            }
            let retained = match self.p.mode {
                Mode::Hydra => {
                    let records = self
                        .ord
                        .records_iter()
                        .filter(|(_, r)| r.pos.values().all(|p| p.sn <= cut))
                        .count();
                    let blocks: usize = self.ord.logs.iter().map(|l| l.entries.range(..=cut).count()).sum();
                    records + blocks
                }
                Mode::Iss => self.iss_epoch_ids.range(..=e).map(|(_, v)| v.len()).sum(),
            };
            self.retained_after_gc.insert(e, retained);
            self.next_gc = e + 1;
        }
    }

    fn pump_iss(&mut self, net: &mut Net) {
        if self.iss_running.is_some() {
            return;
        }
        loop {
            match self.iss.step(net.now()) {
                IssStep::Start(q) => {
                    self.iss_running = Some(net.now());
                    let after = net.scaled(self.id, self.p.vertex_cost * q.tx.vertices.len() as SimTime);
                    net.set_timer(self.id, after, Timer::IssExec);
                    return;
                }
                IssStep::EpochBoundary => {
                    let e = self.iss.newly_closed().expect("boundary with an idle executor");
                    let store = self.iss.store.digest();
                    self.close_epoch(net, e, store);
                }
                IssStep::WaitingGap | IssStep::Busy => return,
            }
        }
    }

    fn finish_iss(&mut self, net: &mut Net) {
        let Some(started) = self.iss_running.take() else { return };
        let (q, _, out) = self.iss.complete();
        self.stats.executed += 1;
        let epoch = q.pos.sn / self.p.epoch_len;
        self.iss_epoch_ids.entry(epoch).or_default().push(q.tx.id);
        let tl = ReplyTimeline {
            proposed_at: q.proposed_at,
            delivered_at: q.delivered_at,
            exec_start: started,
            executed_at: net.now(),
        };
        if self.p.record_history {
            self.history.push(Committed {
                tx: q.tx.clone(),
                pos: BTreeMap::from([(q.ins, q.pos)]),
                success: out.success,
                started,
                finished: net.now(),
            });
        }
        let status = if out.success { ReplyStatus::Success } else { ReplyStatus::Failure };
        self.reply(net, q.tx.id, status, None, tl);
        self.pump_iss(net);
        self.arm_batches(net);
    }

    /// Current object values (for end-of-run comparison).
    pub fn store_values(&self) -> &BTreeMap<crate::model::ObjectKey, i64> {
        match self.p.mode {
            Mode::Hydra => self.exec.store.values(),
            Mode::Iss => self.iss.store.values(),
        }
    }

    pub fn store_digest(&self) -> [u8; 32] {
        match self.p.mode {
            Mode::Hydra => self.exec.store.digest(),
            Mode::Iss => self.iss.store.digest(),
        }
    }
}

/// Baseline bucket assignment: by request digest.
pub fn iss_bucket(d: &TxDigest, m: u32) -> InstanceId {
    let mut b = [0u8; 8];
    b.copy_from_slice(&d.0[..8]);
    (u64::from_be_bytes(b) % m as u64) as InstanceId
}
