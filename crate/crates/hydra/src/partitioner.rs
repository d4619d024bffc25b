//! Object-to-instance assignment and per-instance transaction buckets.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;

use crate::error::{HydraError, Result};
use crate::model::{validate_tx, InstanceId, Keyring, ObjectKey, TransactionDag, TxDigest};

/// 64-bit FNV-1a of the key bytes.
pub fn key_hash(o: &ObjectKey) -> u64 {
    let mut h = FnvHasher::default();
    h.write(o.as_bytes());
    h.finish()
}

pub fn assign(o: &ObjectKey, m: u32) -> InstanceId {
    assert!(m >= 1, "instance count must be positive");
    (key_hash(o) % m as u64) as InstanceId
}

pub fn instances_of(tx: &TransactionDag, m: u32) -> BTreeSet<InstanceId> {
    tx.objects().map(|o| assign(o, m)).collect()
}

#[derive(Debug, Default)]
pub struct Bucket {
    pub instance: InstanceId,
    queue: VecDeque<Arc<TransactionDag>>,
    live: HashSet<TxDigest>,
}

impl Bucket {
    pub fn new(instance: InstanceId) -> Self {
        Bucket {
            instance,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn contains(&self, d: &TxDigest) -> bool {
        self.live.contains(d)
    }

    fn push_back(&mut self, tx: Arc<TransactionDag>) {
        if self.live.insert(tx.id) {
            self.queue.push_back(tx);
        }
    }

    fn push_front(&mut self, tx: Arc<TransactionDag>) {
        if self.live.insert(tx.id) {
            self.queue.push_front(tx);
        }
    }

    /// Drops a transaction (delivered or aborted). Lazy: the queue slot is
    /// skipped on the next pull.
    pub fn remove(&mut self, d: &TxDigest) {
        self.live.remove(d);
    }

    /// Removes and returns up to `max_batch` of the oldest live transactions.
    pub fn pull(&mut self, max_batch: usize) -> Vec<Arc<TransactionDag>> {
        let mut out = Vec::new();
        while out.len() < max_batch {
            let Some(tx) = self.queue.pop_front() else { break };
            if self.live.remove(&tx.id) {
                out.push(tx);
            }
        }
        if self.live.is_empty() {
            self.queue.clear();
        }
        out
    }

    pub fn peek_ids(&self) -> Vec<TxDigest> {
        self.queue
            .iter()
            .filter(|t| self.live.contains(&t.id))
            .map(|t| t.id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routed {
    pub instances: BTreeSet<InstanceId>,
    pub added: bool,
}

impl Routed {
    pub fn is_cross(&self) -> bool {
        self.instances.len() > 1
    }
}

/// One replica's buckets plus the dedup set.
#[derive(Debug)]
pub struct Partitioner {
    pub m: u32,
    buckets: Vec<Bucket>,
    seen: HashSet<TxDigest>,
    pub invalid: u64,
}

impl Partitioner {
    pub fn new(m: u32) -> Self {
        Partitioner {
            m,
            buckets: (0..m).map(Bucket::new).collect(),
            seen: HashSet::new(),
            invalid: 0,
        }
    }

    pub fn bucket(&self, i: InstanceId) -> &Bucket {
        &self.buckets[i as usize]
    }

    pub fn bucket_mut(&mut self, i: InstanceId) -> &mut Bucket {
        &mut self.buckets[i as usize]
    }

    pub fn seen(&self, d: &TxDigest) -> bool {
        self.seen.contains(d)
    }

    pub fn seen_len(&self) -> usize {
        self.seen.len()
    }

    /// Validates and appends `tx` to every bucket owning one of its objects.
    pub fn route_tx(&mut self, tx: Arc<TransactionDag>, keys: &Keyring) -> Result<Routed> {
        if !validate_tx(&tx, keys) {
            self.invalid += 1;
            return Err(HydraError::InvalidTx);
        }
        let instances = instances_of(&tx, self.m);
        self.route_to(tx, instances, false)
    }

    /// Routes to explicit buckets; used by the baseline, which buckets by
    /// request digest. Validation is the caller's job.
    pub fn route_to(
        &mut self,
        tx: Arc<TransactionDag>,
        instances: BTreeSet<InstanceId>,
        front: bool,
    ) -> Result<Routed> {
        if !self.seen.insert(tx.id) {
            return Ok(Routed {
                instances,
                added: false,
            });
        }
        for &i in &instances {
            let b = &mut self.buckets[i as usize];
            if front {
                b.push_front(tx.clone());
            } else {
                b.push_back(tx.clone());
            }
        }
        Ok(Routed {
            instances,
            added: true,
        })
    }

    /// Puts a retried transaction at the head of its buckets so it is
    /// proposed before fresh work.
    pub fn reinsert_front(&mut self, tx: Arc<TransactionDag>) -> Routed {
        let instances = instances_of(&tx, self.m);
        self.route_to(tx, instances, true).expect("reinsert cannot fail")
    }

    /// Puts proposals that never got delivered back at the head of bucket
    /// `i`, oldest first. Bypasses dedup: these were seen already.
    pub fn restore_front(&mut self, i: InstanceId, txs: impl DoubleEndedIterator<Item = Arc<TransactionDag>>) {
        let b = &mut self.buckets[i as usize];
        for tx in txs.rev() {
            b.push_front(tx);
        }
    }

    pub fn pull_valid_tx(&mut self, i: InstanceId, max_batch: usize) -> Vec<Arc<TransactionDag>> {
        self.buckets[i as usize].pull(max_batch)
    }

    /// Forgets dedup entries once their epoch is garbage-collected.
    pub fn forget(&mut self, ids: impl IntoIterator<Item = TxDigest>) {
        for d in ids {
            self.seen.remove(&d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Op, Party, VertexSpec};

    fn tx(keys: &Keyring, nonce: u64, objs: &[&str]) -> Arc<TransactionDag> {
        let specs = objs
            .iter()
            .map(|o| VertexSpec::new(*o, Op::Add, 1))
            .collect();
        Arc::new(TransactionDag::build(keys, Party::Client(0), nonce, specs, []))
    }

    #[test]
    fn single_instance() {
        for k in ["A", "B", "zz", "object-17"] {
            assert_eq!(assign(&k.into(), 1), 0);
        }
    }

    #[test]
    fn duplicate_is_noop() {
        let keys = Keyring::new(1);
        let mut p = Partitioner::new(4);
        let t = tx(&keys, 1, &["A", "B"]);
        assert!(p.route_tx(t.clone(), &keys).unwrap().added);
        assert!(!p.route_tx(t, &keys).unwrap().added);
        let total: usize = (0..4).map(|i| p.bucket(i).len()).sum();
        assert_eq!(total, instances_of(&tx(&keys, 1, &["A", "B"]), 4).len());
    }

    #[test]
    fn invalid_dropped() {
        let keys = Keyring::new(1);
        let mut p = Partitioner::new(4);
        let mut t = (*tx(&keys, 1, &["A"])).clone();
        t.vertices[0].amount = 2;
        assert!(matches!(
            p.route_tx(Arc::new(t), &keys),
            Err(HydraError::InvalidTx)
        ));
        assert_eq!(p.invalid, 1);
    }

    #[test]
    fn batch_limits_and_reinsert_priority() {
        let keys = Keyring::new(1);
        let mut p = Partitioner::new(1);
        for n in 0..5000 {
            p.route_tx(tx(&keys, n, &["A"]), &keys).unwrap();
        }
        let b = p.pull_valid_tx(0, 4096);
        assert_eq!(b.len(), 4096);
        assert_eq!(b[0].nonce, 0);
        assert_eq!(b[4095].nonce, 4095);
        let rest = p.pull_valid_tx(0, 4096);
        assert_eq!(rest.len(), 904);

        for n in 0..100 {
            p.route_tx(tx(&keys, 10_000 + n, &["A"]), &keys).unwrap();
        }
        let retry = Arc::new(b[7].retry());
        p.reinsert_front(retry.clone());
        let batch = p.pull_valid_tx(0, 4096);
        assert_eq!(batch.len(), 101);
        assert_eq!(batch[0].id, retry.id);
    }

    #[test]
    fn removed_entries_are_skipped() {
        let keys = Keyring::new(1);
        let mut p = Partitioner::new(1);
        let a = tx(&keys, 1, &["A"]);
        let b = tx(&keys, 2, &["A"]);
        p.route_tx(a.clone(), &keys).unwrap();
        p.route_tx(b.clone(), &keys).unwrap();
        p.bucket_mut(0).remove(&a.id);
        let got = p.pull_valid_tx(0, 10);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, b.id);
    }
}
