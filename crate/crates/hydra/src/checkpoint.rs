//! Epoch checkpoints: signed digests, quorum certificates, and the trigger
//! for garbage collection.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{HydraError, Result};
use crate::model::{sha256, Authenticator, Encoder, EpochId, Keyring, Party, ReplicaId, SystemState};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMsg {
    pub epoch: EpochId,
    pub digest: [u8; 32],
    pub replica: ReplicaId,
    pub sig: Authenticator,
}

impl CheckpointMsg {
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(6);
        e.u64(self.epoch);
        e.raw(&self.digest);
        e.u32(self.replica);
        e.into_bytes()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(&self.signed_bytes());
        self.sig.encode(&mut e);
        e.into_bytes()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StableCheckpoint {
    pub epoch: EpochId,
    pub digest: [u8; 32],
    pub certificate: Vec<CheckpointMsg>,
}

/// Digest over the state vector at the cut, the epoch's block digests (in
/// instance order), and the store digest at the cut.
pub fn checkpoint_digest(
    epoch: EpochId,
    state: &SystemState,
    blocks: &[[u8; 32]],
    store: &[u8; 32],
) -> [u8; 32] {
    let mut e = Encoder::new();
    e.raw(b"hydra/checkpoint");
    e.u64(epoch);
    e.u32(state.frontier.len() as u32);
    for f in &state.frontier {
        e.i64(*f);
    }
    e.u32(blocks.len() as u32);
    for b in blocks {
        e.raw(b);
    }
    e.raw(store);
    sha256(e.bytes())
}

#[derive(Debug)]
pub struct CheckpointTracker {
    pub me: ReplicaId,
    quorum: usize,
    keys: Keyring,
    votes: BTreeMap<EpochId, BTreeMap<[u8; 32], BTreeMap<ReplicaId, CheckpointMsg>>>,
    voted: BTreeSet<(EpochId, ReplicaId)>,
    stable: BTreeMap<EpochId, StableCheckpoint>,
    emitted: BTreeMap<EpochId, [u8; 32]>,
}

impl CheckpointTracker {
    pub fn new(me: ReplicaId, n: u32, f: u32, keys: Keyring) -> Self {
        CheckpointTracker {
            me,
            quorum: crate::model::quorum_size(n, f),
            keys,
            votes: BTreeMap::new(),
            voted: BTreeSet::new(),
            stable: BTreeMap::new(),
            emitted: BTreeMap::new(),
        }
    }

    /// Builds this replica's checkpoint message. `closed` reports whether the
    /// epoch's cut is complete.
    pub fn emit_checkpoint(&mut self, epoch: EpochId, closed: bool, digest: [u8; 32]) -> Result<CheckpointMsg> {
        if !closed {
            return Err(HydraError::EpochOpen(epoch));
        }
        self.emitted.insert(epoch, digest);
        let mut msg = CheckpointMsg {
            epoch,
            digest,
            replica: self.me,
            sig: Authenticator {
                signer: Party::Replica(self.me),
                tag: [0; 32],
            },
        };
        msg.sig = self.keys.sign(Party::Replica(self.me), &msg.signed_bytes());
        Ok(msg)
    }

    pub fn emitted(&self, epoch: EpochId) -> Option<[u8; 32]> {
        self.emitted.get(&epoch).copied()
    }

    /// Counts an authenticated message; returns the certificate the first
    /// time a quorum of matching digests are seen for an epoch.
    pub fn on_checkpoint_msg(&mut self, msg: CheckpointMsg) -> Result<Option<StableCheckpoint>> {
        if msg.sig.signer != Party::Replica(msg.replica) || !self.keys.verify(&msg.sig, &msg.signed_bytes()) {
            return Err(HydraError::AuthFail);
        }
        if self.stable.contains_key(&msg.epoch) || !self.voted.insert((msg.epoch, msg.replica)) {
            return Ok(None);
        }
        let (epoch, digest) = (msg.epoch, msg.digest);
        let set = self.votes.entry(epoch).or_default().entry(digest).or_default();
        set.insert(msg.replica, msg);
        if set.len() < self.quorum {
            return Ok(None);
        }
        let cert = StableCheckpoint {
            epoch,
            digest,
            certificate: set.values().cloned().collect(),
        };
        self.stable.insert(epoch, cert.clone());
        self.votes.remove(&epoch);
        self.voted.retain(|(e, _)| *e != epoch);
        Ok(Some(cert))
    }

    pub fn stable(&self, epoch: EpochId) -> Option<&StableCheckpoint> {
        self.stable.get(&epoch)
    }

    pub fn last_stable(&self) -> Option<&StableCheckpoint> {
        self.stable.values().next_back()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trackers(n: u32) -> Vec<CheckpointTracker> {
        let keys = Keyring::new(4);
        (0..n).map(|r| CheckpointTracker::new(r, n, (n - 1) / 3, keys.clone())).collect()
    }

    #[test]
    fn quorum_of_three_at_n4() {
        let mut t = trackers(4);
        let msgs: Vec<_> = (0..3).map(|r| t[r].emit_checkpoint(0, true, [7; 32]).unwrap()).collect();
        assert_eq!(t[3].on_checkpoint_msg(msgs[0].clone()).unwrap(), None);
        assert_eq!(t[3].on_checkpoint_msg(msgs[1].clone()).unwrap(), None);
        let s = t[3].on_checkpoint_msg(msgs[2].clone()).unwrap().unwrap();
        assert_eq!(s.digest, [7; 32]);
        assert_eq!(s.certificate.len(), 3);
    }

    #[test]
    fn conflicting_minority_cannot_stabilise() {
        let mut t = trackers(4);
        let bad = t[0].emit_checkpoint(0, true, [1; 32]).unwrap();
        let good: Vec<_> = (1..3).map(|r| t[r].emit_checkpoint(0, true, [2; 32]).unwrap()).collect();
        assert_eq!(t[3].on_checkpoint_msg(bad).unwrap(), None);
        for g in good {
            assert_eq!(t[3].on_checkpoint_msg(g).unwrap(), None);
        }
    }

    #[test]
    fn open_epoch_and_forgery() {
        let mut t = trackers(4);
        assert!(matches!(t[0].emit_checkpoint(3, false, [0; 32]), Err(HydraError::EpochOpen(3))));
        let mut m = t[0].emit_checkpoint(0, true, [0; 32]).unwrap();
        m.replica = 2;
        assert!(matches!(t[1].on_checkpoint_msg(m), Err(HydraError::AuthFail)));
    }
}
