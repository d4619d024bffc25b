//! Sequenced broadcast for one instance, realised as PBFT: pre-prepare,
//! prepare, commit, plus view change with no-op fill.
//!
//! `SbInstance` is a pure state machine. It consumes messages and returns
//! actions; the replica turns those into network sends and timers. All
//! replicas (leader included) send prepares, so a round is prepared at a
//! quorum of matching prepares and committed at a quorum of matching
//! commits. Commit certificates from older views stay valid, which is how
//! lagging replicas catch up on slots decided before a view change.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{HydraError, Result};
use crate::model::{sha256, Authenticator, Block, Encoder, InstanceId, Keyring, Party, ReplicaId, SeqNum};

pub type Digest32 = [u8; 32];

#[derive(Clone, Debug)]
pub struct SbConfig {
    pub instance: InstanceId,
    pub n: u32,
    pub f: u32,
    pub view_timeout_us: u64,
}

impl SbConfig {
    pub fn quorum(&self) -> usize {
        crate::model::quorum_size(self.n, self.f)
    }

    /// Leader of this instance in `view`; view 0 starts at replica `instance`.
    pub fn leader(&self, view: u64) -> ReplicaId {
        ((self.instance as u64 + view) % self.n as u64) as ReplicaId
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    PrePrepared,
    Prepared,
    Committed,
    Delivered,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrePrepare {
    pub ins: InstanceId,
    pub view: u64,
    pub sn: SeqNum,
    pub block: Arc<Block>,
    pub sig: Authenticator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteKind {
    Prepare,
    Commit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    pub kind: VoteKind,
    pub ins: InstanceId,
    pub view: u64,
    pub sn: SeqNum,
    pub digest: Digest32,
    pub replica: ReplicaId,
    pub sig: Authenticator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedEntry {
    pub sn: SeqNum,
    pub view: u64,
    pub block: Arc<Block>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewChange {
    pub ins: InstanceId,
    pub new_view: u64,
    pub replica: ReplicaId,
    /// Highest contiguously delivered sn, or -1.
    pub frontier: i64,
    pub prepared: Vec<PreparedEntry>,
    pub sig: Authenticator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewView {
    pub ins: InstanceId,
    pub view: u64,
    pub replica: ReplicaId,
    pub resume_sn: SeqNum,
    pub blocks: Vec<Arc<Block>>,
    pub voters: Vec<ReplicaId>,
    pub sig: Authenticator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SbMsg {
    PrePrepare(PrePrepare),
    Vote(Vote),
    ViewChange(ViewChange),
    NewView(NewView),
}

const TAG_PREPREPARE: u8 = 1;
const TAG_PREPARE: u8 = 2;
const TAG_COMMIT: u8 = 3;
const TAG_VIEWCHANGE: u8 = 4;
const TAG_NEWVIEW: u8 = 5;

impl SbMsg {
    pub fn instance(&self) -> InstanceId {
        match self {
            SbMsg::PrePrepare(m) => m.ins,
            SbMsg::Vote(m) => m.ins,
            SbMsg::ViewChange(m) => m.ins,
            SbMsg::NewView(m) => m.ins,
        }
    }

    pub fn sig(&self) -> &Authenticator {
        match self {
            SbMsg::PrePrepare(m) => &m.sig,
            SbMsg::Vote(m) => &m.sig,
            SbMsg::ViewChange(m) => &m.sig,
            SbMsg::NewView(m) => &m.sig,
        }
    }

    /// Transactions carried, for processing-cost accounting.
    pub fn tx_count(&self) -> usize {
        match self {
            SbMsg::PrePrepare(m) => m.block.txs.len(),
            SbMsg::ViewChange(m) => m.prepared.iter().map(|p| p.block.txs.len()).sum(),
            SbMsg::NewView(m) => m.blocks.iter().map(|b| b.txs.len()).sum(),
            SbMsg::Vote(_) => 0,
        }
    }

    /// Canonical encoding of everything except the authenticator.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            SbMsg::PrePrepare(m) => {
                e.u8(TAG_PREPREPARE);
                e.u32(m.ins);
                e.u64(m.view);
                e.u64(m.sn);
                m.block.encode_body(&mut e);
            }
            SbMsg::Vote(m) => {
                e.u8(match m.kind {
                    VoteKind::Prepare => TAG_PREPARE,
                    VoteKind::Commit => TAG_COMMIT,
                });
                e.u32(m.ins);
                e.u64(m.view);
                e.u64(m.sn);
                e.raw(&m.digest);
                e.u32(m.replica);
            }
            SbMsg::ViewChange(m) => {
                e.u8(TAG_VIEWCHANGE);
                e.u32(m.ins);
                e.u64(m.new_view);
                e.u32(m.replica);
                e.i64(m.frontier);
                e.u32(m.prepared.len() as u32);
                for p in &m.prepared {
                    e.u64(p.sn);
                    e.u64(p.view);
                    p.block.encode_body(&mut e);
                }
            }
            SbMsg::NewView(m) => {
                e.u8(TAG_NEWVIEW);
                e.u32(m.ins);
                e.u64(m.view);
                e.u32(m.replica);
                e.u64(m.resume_sn);
                e.u32(m.blocks.len() as u32);
                for b in &m.blocks {
                    b.encode_body(&mut e);
                }
                e.u32(m.voters.len() as u32);
                for v in &m.voters {
                    e.u32(*v);
                }
            }
        }
        e.into_bytes()
    }

    /// Canonical wire encoding: signed bytes followed by the authenticator.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(&self.signed_bytes());
        self.sig().encode(&mut e);
        e.into_bytes()
    }

    fn sign(mut self, keys: &Keyring, me: ReplicaId) -> SbMsg {
        let auth = keys.sign(Party::Replica(me), &self.signed_bytes());
        match &mut self {
            SbMsg::PrePrepare(m) => m.sig = auth,
            SbMsg::Vote(m) => m.sig = auth,
            SbMsg::ViewChange(m) => m.sig = auth,
            SbMsg::NewView(m) => m.sig = auth,
        }
        self
    }

    pub fn verify(&self, keys: &Keyring, sender: ReplicaId) -> bool {
        self.sig().signer == Party::Replica(sender) && keys.verify(self.sig(), &self.signed_bytes())
    }
}

pub fn block_digest(b: &Block) -> Digest32 {
    b.body_digest()
}

const NO_SIG: Authenticator = Authenticator {
    signer: Party::Replica(0),
    tag: [0; 32],
};

#[derive(Debug)]
pub enum SbAction {
    Broadcast(SbMsg),
    Deliver(Arc<Block>),
    /// A view was installed; the replica may now lead from `next_sn`.
    Installed { view: u64 },
    /// Protocol evidence of a faulty leader.
    Suspect { reason: HydraError },
}

#[derive(Debug, Default)]
pub struct SbRoundState {
    pub sn: SeqNum,
    pub phase: Option<Phase>,
    proposals: BTreeMap<u64, (Arc<Block>, Digest32)>,
    prepares: BTreeMap<(u64, Digest32), BTreeSet<ReplicaId>>,
    commits: BTreeMap<(u64, Digest32), BTreeSet<ReplicaId>>,
    sent_prepare: BTreeSet<u64>,
    sent_commit: BTreeSet<u64>,
    poisoned: BTreeSet<u64>,
    prepared: Option<(u64, Arc<Block>)>,
    committed: Option<Arc<Block>>,
}

impl SbRoundState {
    pub fn prepare_count(&self, view: u64, d: &Digest32) -> usize {
        self.prepares.get(&(view, *d)).map_or(0, |s| s.len())
    }
    pub fn commit_count(&self, view: u64, d: &Digest32) -> usize {
        self.commits.get(&(view, *d)).map_or(0, |s| s.len())
    }
    fn block_for(&self, d: &Digest32) -> Option<Arc<Block>> {
        self.proposals
            .values()
            .find(|(_, bd)| bd == d)
            .map(|(b, _)| b.clone())
    }
}

#[derive(Debug, Default)]
pub struct ViewChangeState {
    pub view: u64,
    pub new_leader: ReplicaId,
    pub resume_sn: SeqNum,
    pub votes: BTreeMap<ReplicaId, ViewChange>,
    pub sent_new_view: bool,
}

pub struct SbInstance {
    pub cfg: SbConfig,
    pub me: ReplicaId,
    keys: Keyring,
    view: u64,
    /// Target view while a view change is in progress.
    changing_to: Option<u64>,
    next_sn: SeqNum,
    deliver_next: SeqNum,
    rounds: BTreeMap<SeqNum, SbRoundState>,
    vc: BTreeMap<u64, ViewChangeState>,
    delivered_count: u64,
    retries: u32,
    pub equivocations: u64,
    pub view_changes: u64,
}

impl SbInstance {
    pub fn new(cfg: SbConfig, me: ReplicaId, keys: Keyring) -> Self {
        SbInstance {
            cfg,
            me,
            keys,
            view: 0,
            changing_to: None,
            next_sn: 0,
            deliver_next: 0,
            rounds: BTreeMap::new(),
            vc: BTreeMap::new(),
            delivered_count: 0,
            retries: 0,
            equivocations: 0,
            view_changes: 0,
        }
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn leader(&self) -> ReplicaId {
        self.cfg.leader(self.view)
    }

    pub fn is_leader(&self) -> bool {
        self.changing_to.is_none() && self.leader() == self.me
    }

    pub fn in_view_change(&self) -> bool {
        self.changing_to.is_some()
    }

    pub fn next_sn(&self) -> SeqNum {
        self.next_sn
    }

    /// First sn not yet delivered locally.
    pub fn deliver_next(&self) -> SeqNum {
        self.deliver_next
    }

    /// True when the leader may cut the next block: sequential rounds.
    pub fn ready_to_propose(&self) -> bool {
        self.is_leader() && self.next_sn == self.deliver_next
    }

    /// Changes whenever the instance makes progress; used by the failure
    /// detector to decide whether a timeout is genuine.
    pub fn progress_marker(&self) -> (u64, u64) {
        (self.delivered_count, self.view)
    }

    pub fn current_timeout_us(&self) -> u64 {
        self.cfg.view_timeout_us << self.retries.min(16)
    }

    pub fn round(&self, sn: SeqNum) -> Option<&SbRoundState> {
        self.rounds.get(&sn)
    }

    pub fn sb_broadcast(&mut self, mut block: Block) -> Result<Vec<SbAction>> {
        if !self.is_leader() {
            return Err(HydraError::NotLeader {
                replica: self.me,
                instance: self.cfg.instance,
            });
        }
        if block.sn != self.next_sn {
            return Err(HydraError::StaleSn {
                expected: self.next_sn,
                got: block.sn,
            });
        }
        block.ins = self.cfg.instance;
        let block = Arc::new(block.sign(&self.keys, self.me));
        self.next_sn += 1;
        let msg = SbMsg::PrePrepare(PrePrepare {
            ins: self.cfg.instance,
            view: self.view,
            sn: block.sn,
            block,
            sig: NO_SIG,
        })
        .sign(&self.keys, self.me);
        Ok(vec![SbAction::Broadcast(msg)])
    }

    /// Handles an authenticated message from `from`.
    pub fn on_sb_message(&mut self, from: ReplicaId, msg: SbMsg) -> Result<Vec<SbAction>> {
        if !msg.verify(&self.keys, from) {
            return Err(HydraError::AuthFail);
        }
        let mut out = Vec::new();
        match msg {
            SbMsg::PrePrepare(pp) => self.on_preprepare(from, pp, &mut out),
            SbMsg::Vote(v) => self.on_vote(v, &mut out),
            SbMsg::ViewChange(vc) => self.on_view_change(vc, &mut out),
            SbMsg::NewView(nv) => self.on_new_view(from, nv, &mut out),
        }
        Ok(out)
    }

    fn vote(&self, kind: VoteKind, view: u64, sn: SeqNum, digest: Digest32) -> SbMsg {
        SbMsg::Vote(Vote {
            kind,
            ins: self.cfg.instance,
            view,
            sn,
            digest,
            replica: self.me,
            sig: NO_SIG,
        })
        .sign(&self.keys, self.me)
    }

    fn accept_proposal(&mut self, view: u64, block: Arc<Block>, out: &mut Vec<SbAction>) {
        let sn = block.sn;
        let d = block_digest(&block);
        let round = self.rounds.entry(sn).or_insert_with(|| SbRoundState {
            sn,
            ..Default::default()
        });
        if let Some((_, existing)) = round.proposals.get(&view) {
            if *existing != d {
                round.poisoned.insert(view);
                self.equivocations += 1;
                out.push(SbAction::Suspect {
                    reason: HydraError::Equivocation {
                        instance: self.cfg.instance,
                        sn,
                        view,
                    },
                });
            }
            return;
        }
        round.proposals.insert(view, (block, d));
        if round.phase.is_none() {
            round.phase = Some(Phase::PrePrepared);
        }
        if round.sent_prepare.insert(view) {
            let v = self.vote(VoteKind::Prepare, view, sn, d);
            out.push(SbAction::Broadcast(v));
        }
        self.check_round(sn, out);
    }

    fn on_preprepare(&mut self, from: ReplicaId, pp: PrePrepare, out: &mut Vec<SbAction>) {
        if pp.view != self.view
            || self.changing_to.is_some()
            || from != self.cfg.leader(pp.view)
            || pp.block.sn != pp.sn
            || pp.block.ins != self.cfg.instance
            || !pp.block.verify(&self.keys)
        {
            return;
        }
        self.accept_proposal(pp.view, pp.block, out);
    }

    fn on_vote(&mut self, v: Vote, out: &mut Vec<SbAction>) {
        let round = self.rounds.entry(v.sn).or_insert_with(|| SbRoundState {
            sn: v.sn,
            ..Default::default()
        });
        let set = match v.kind {
            VoteKind::Prepare => round.prepares.entry((v.view, v.digest)).or_default(),
            VoteKind::Commit => round.commits.entry((v.view, v.digest)).or_default(),
        };
        set.insert(v.replica);
        self.check_round(v.sn, out);
    }

    fn check_round(&mut self, sn: SeqNum, out: &mut Vec<SbAction>) {
        let q = self.cfg.quorum();
        let view = self.view;
        let changing = self.changing_to.is_some();
        let mut commit_vote = None;
        {
            let Some(round) = self.rounds.get_mut(&sn) else { return };
            if let Some((block, d)) = round.proposals.get(&view).cloned() {
                let ok = !changing && !round.poisoned.contains(&view);
                if ok && round.prepare_count(view, &d) >= q {
                    if round.prepared.as_ref().is_none_or(|(pv, _)| *pv < view) {
                        round.prepared = Some((view, block));
                    }
                    if round.phase < Some(Phase::Prepared) {
                        round.phase = Some(Phase::Prepared);
                    }
                    if round.sent_commit.insert(view) {
                        commit_vote = Some(d);
                    }
                }
            }
            if round.committed.is_none() {
                let cert = round
                    .commits
                    .iter()
                    .find(|(_, s)| s.len() >= q)
                    .map(|((_, d), _)| *d);
                if let Some(d) = cert {
                    if let Some(b) = round.block_for(&d) {
                        round.committed = Some(b);
                        if round.phase < Some(Phase::Committed) {
                            round.phase = Some(Phase::Committed);
                        }
                    }
                }
            }
        }
        if let Some(d) = commit_vote {
            out.push(SbAction::Broadcast(self.vote(VoteKind::Commit, view, sn, d)));
        }
        self.try_deliver(out);
    }

    fn try_deliver(&mut self, out: &mut Vec<SbAction>) {
        loop {
            let sn = self.deliver_next;
            let Some(round) = self.rounds.get_mut(&sn) else { break };
            let Some(block) = round.committed.clone() else { break };
            round.phase = Some(Phase::Delivered);
            self.deliver_next += 1;
            self.delivered_count += 1;
            self.retries = 0;
            if self.next_sn < self.deliver_next {
                self.next_sn = self.deliver_next;
            }
            out.push(SbAction::Deliver(block));
        }
    }

    /// Failure detector hook: starts (or escalates) a view change.
    pub fn suspect_and_view_change(&mut self) -> Vec<SbAction> {
        let target = match self.changing_to {
            Some(t) => t + 1,
            None => self.view + 1,
        };
        self.retries = self.retries.saturating_add(1);
        self.start_view_change(target)
    }

    fn start_view_change(&mut self, target: u64) -> Vec<SbAction> {
        if target <= self.view || self.changing_to.is_some_and(|t| t >= target) {
            return Vec::new();
        }
        self.changing_to = Some(target);
        self.view_changes += 1;
        let prepared = self
            .rounds
            .range(self.deliver_next..)
            .filter_map(|(&sn, r)| {
                r.prepared.as_ref().map(|(v, b)| PreparedEntry {
                    sn,
                    view: *v,
                    block: b.clone(),
                })
            })
            .collect();
        let msg = SbMsg::ViewChange(ViewChange {
            ins: self.cfg.instance,
            new_view: target,
            replica: self.me,
            frontier: self.deliver_next as i64 - 1,
            prepared,
            sig: NO_SIG,
        })
        .sign(&self.keys, self.me);
        vec![SbAction::Broadcast(msg)]
    }

    fn on_view_change(&mut self, vc: ViewChange, out: &mut Vec<SbAction>) {
        if vc.new_view <= self.view {
            return;
        }
        let t = vc.new_view;
        let leader = self.cfg.leader(t);
        let st = self.vc.entry(t).or_insert_with(|| ViewChangeState {
            view: t,
            new_leader: leader,
            ..Default::default()
        });
        st.votes.insert(vc.replica, vc);
        let votes = st.votes.len();
        // Join a view change that f+1 replicas already want.
        if votes > self.cfg.f as usize && self.changing_to.is_none_or(|c| c < t) {
            out.extend(self.start_view_change(t));
        }
        if leader == self.me {
            let st = self.vc.get_mut(&t).expect("just inserted");
            if st.votes.len() >= self.cfg.quorum() && !st.sent_new_view {
                st.sent_new_view = true;
                let nv = build_new_view(&self.cfg, t, self.me, &st.votes, &self.keys);
                st.resume_sn = nv.resume_sn;
                out.push(SbAction::Broadcast(SbMsg::NewView(nv).sign(&self.keys, self.me)));
            }
        }
    }

    fn on_new_view(&mut self, from: ReplicaId, nv: NewView, out: &mut Vec<SbAction>) {
        if nv.view <= self.view || from != self.cfg.leader(nv.view) {
            return;
        }
        let voters: BTreeSet<_> = nv.voters.iter().copied().collect();
        if voters.len() < self.cfg.quorum() {
            return;
        }
        for (k, b) in nv.blocks.iter().enumerate() {
            if b.sn != nv.resume_sn + k as u64 || b.ins != self.cfg.instance {
                return;
            }
        }
        self.view = nv.view;
        self.changing_to = None;
        self.vc.retain(|&v, _| v > nv.view);
        self.next_sn = (nv.resume_sn + nv.blocks.len() as u64).max(self.deliver_next);
        for b in nv.blocks {
            self.accept_proposal(nv.view, b, out);
        }
        out.push(SbAction::Installed { view: self.view });
    }

    /// Drops round state strictly below `sn` that is already delivered.
    pub fn prune_below(&mut self, sn: SeqNum) {
        let keep_from = sn.min(self.deliver_next);
        self.rounds = self.rounds.split_off(&keep_from);
    }

    pub fn retained_rounds(&self) -> usize {
        self.rounds.len()
    }
}

/// New-view content: resume after the highest frontier in the quorum,
/// re-propose the highest-view prepared block per slot, and fill the rest
/// with empty blocks.
pub fn build_new_view(
    cfg: &SbConfig,
    view: u64,
    leader: ReplicaId,
    votes: &BTreeMap<ReplicaId, ViewChange>,
    keys: &Keyring,
) -> NewView {
    let resume = votes.values().map(|v| v.frontier).max().unwrap_or(-1) + 1;
    let resume = resume.max(0) as u64;
    let mut best: BTreeMap<SeqNum, (u64, Arc<Block>)> = BTreeMap::new();
    for vc in votes.values() {
        for p in &vc.prepared {
            if p.sn < resume {
                continue;
            }
            match best.get(&p.sn) {
                Some((v, _)) if *v >= p.view => {}
                _ => {
                    best.insert(p.sn, (p.view, p.block.clone()));
                }
            }
        }
    }
    let hi = best.keys().next_back().copied();
    let mut blocks = Vec::new();
    if let Some(hi) = hi {
        for sn in resume..=hi {
            match best.get(&sn) {
                Some((_, b)) => blocks.push(b.clone()),
                None => {
                    let b = Block::empty(cfg.instance, sn).sign(keys, leader);
                    blocks.push(Arc::new(b));
                }
            }
        }
    }
    NewView {
        ins: cfg.instance,
        view,
        replica: leader,
        resume_sn: resume,
        blocks,
        voters: votes.keys().copied().collect(),
        sig: NO_SIG,
    }
}

/// Digest of a block id list, used by checkpoints.
pub fn blocks_digest<'a>(blocks: impl IntoIterator<Item = &'a Block>) -> Digest32 {
    let mut e = Encoder::new();
    for b in blocks {
        e.raw(&b.body_digest());
    }
    sha256(e.bytes())
}
