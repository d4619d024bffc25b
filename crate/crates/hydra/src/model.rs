//! Domain types shared by every layer: objects, vertices, transaction DAGs,
//! blocks, the state vector, and the keyed authenticators that stand in for
//! signatures.
//!
//! All canonical encodings are length-prefixed and big-endian with a fixed
//! field order. They are what digests and authenticators are computed over,
//! and they double as the golden-vector format in tests.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{HydraError, Result};

pub type ReplicaId = u32;
pub type InstanceId = u32;
pub type SeqNum = u64;
pub type EpochId = u64;
pub type ClientId = u32;

/// Sentinel used in state vectors for "nothing delivered yet".
pub const NONE_SN: i64 = -1;

/// Byzantine quorum for `n` replicas tolerating `f` faults: any two quorums
/// share at least f+1 replicas. Equals 2f+1 when n = 3f+1.
pub fn quorum_size(n: u32, f: u32) -> usize {
    ((n + f + 2) / 2) as usize
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TxDigest(pub [u8; 32]);

impl TxDigest {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short(&self) -> String {
        self.to_hex()[..8].to_string()
    }
}

impl fmt::Debug for TxDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx:{}", self.short())
    }
}

impl fmt::Display for TxDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectKey(Vec<u8>);

impl ObjectKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(HydraError::EmptyKey);
        }
        Ok(ObjectKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for ObjectKey {
    fn from(s: &str) -> Self {
        ObjectKey::new(s.as_bytes().to_vec()).expect("object key must be non-empty")
    }
}

impl fmt::Debug for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", String::from_utf8_lossy(&self.0))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectRecord {
    pub key: ObjectKey,
    pub value: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Sub,
    Set,
}

impl Op {
    fn tag(self) -> u8 {
        match self {
            Op::Add => 1,
            Op::Sub => 2,
            Op::Set => 3,
        }
    }
}

/// Predicate on an object's value before the vertex applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    MinBalance(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Replica(ReplicaId),
    Client(ClientId),
}

impl Party {
    fn encode(self, enc: &mut Encoder) {
        match self {
            Party::Replica(r) => {
                enc.u8(0);
                enc.u32(r);
            }
            Party::Client(c) => {
                enc.u8(1);
                enc.u32(c);
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Authenticator {
    pub signer: Party,
    pub tag: [u8; 32],
}

impl fmt::Debug for Authenticator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "auth({:?})", self.signer)
    }
}

impl Authenticator {
    pub fn encode(&self, enc: &mut Encoder) {
        self.signer.encode(enc);
        enc.raw(&self.tag);
    }
}

/// Per-party secret keys derived from the scenario seed.
#[derive(Clone, Debug)]
pub struct Keyring {
    seed: u64,
}

impl Keyring {
    pub fn new(seed: u64) -> Self {
        Keyring { seed }
    }

    fn key(&self, party: Party) -> [u8; 32] {
        let mut enc = Encoder::new();
        enc.raw(b"hydra/key");
        enc.u64(self.seed);
        party.encode(&mut enc);
        sha256(enc.bytes())
    }

    pub fn sign(&self, party: Party, payload: &[u8]) -> Authenticator {
        Authenticator {
            signer: party,
            tag: self.tag(party, payload),
        }
    }

    pub fn verify(&self, auth: &Authenticator, payload: &[u8]) -> bool {
        self.tag(auth.signer, payload) == auth.tag
    }

    fn tag(&self, party: Party, payload: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.key(party));
        h.update((payload.len() as u64).to_be_bytes());
        h.update(payload);
        h.finalize().into()
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Length-prefixed, big-endian byte writer.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { buf: Vec::new() }
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }
    pub fn var(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    pub fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Vertex {
    pub object: ObjectKey,
    pub op: Op,
    pub amount: i64,
    pub condition: Option<Condition>,
    pub owner_sig: Authenticator,
}

impl Vertex {
    /// Bytes covered by the owner's authenticator. The attempt counter is
    /// deliberately not covered so replicas can derive retries.
    pub fn signed_payload(
        nonce: u64,
        object: &ObjectKey,
        op: Op,
        amount: i64,
        condition: Option<Condition>,
    ) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(b"hydra/vertex");
        enc.u64(nonce);
        enc.var(object.as_bytes());
        enc.u8(op.tag());
        enc.i64(amount);
        encode_condition(&mut enc, condition);
        enc.into_bytes()
    }

    /// Threshold applied to the pre-value, with SUB's implicit default.
    pub fn effective_threshold(&self) -> Option<i64> {
        match (self.condition, self.op) {
            (Some(Condition::MinBalance(t)), _) => Some(t),
            (None, Op::Sub) => Some(self.amount),
            (None, _) => None,
        }
    }

    /// New value if the condition holds and the arithmetic does not overflow.
    pub fn apply(&self, pre: i64) -> Option<i64> {
        if let Some(t) = self.effective_threshold() {
            if pre < t {
                return None;
            }
        }
        match self.op {
            Op::Add => pre.checked_add(self.amount),
            Op::Sub => pre.checked_sub(self.amount),
            Op::Set => Some(self.amount),
        }
    }
}

fn encode_condition(enc: &mut Encoder, condition: Option<Condition>) {
    match condition {
        None => enc.u8(0),
        Some(Condition::MinBalance(t)) => {
            enc.u8(1);
            enc.i64(t);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TransactionDag {
    pub id: TxDigest,
    pub nonce: u64,
    pub attempt: u32,
    pub vertices: Vec<Vertex>,
    pub edges: BTreeSet<(u32, u32)>,
    /// Simulated payload size; metadata only, not encoded.
    pub payload_bytes: u32,
}

/// Unsigned vertex description used when building a transaction.
#[derive(Clone, Debug)]
pub struct VertexSpec {
    pub object: ObjectKey,
    pub op: Op,
    pub amount: i64,
    pub condition: Option<Condition>,
}

impl VertexSpec {
    pub fn new(object: impl Into<ObjectKey>, op: Op, amount: i64) -> Self {
        VertexSpec {
            object: object.into(),
            op,
            amount,
            condition: None,
        }
    }

    pub fn with_condition(mut self, c: Condition) -> Self {
        self.condition = Some(c);
        self
    }
}

impl TransactionDag {
    /// Builds and signs a transaction on behalf of `owner`.
    pub fn build(
        keys: &Keyring,
        owner: Party,
        nonce: u64,
        specs: Vec<VertexSpec>,
        edges: impl IntoIterator<Item = (u32, u32)>,
    ) -> TransactionDag {
        let vertices = specs
            .into_iter()
            .map(|s| {
                let payload =
                    Vertex::signed_payload(nonce, &s.object, s.op, s.amount, s.condition);
                Vertex {
                    owner_sig: keys.sign(owner, &payload),
                    object: s.object,
                    op: s.op,
                    amount: s.amount,
                    condition: s.condition,
                }
            })
            .collect();
        let mut tx = TransactionDag {
            id: TxDigest::default(),
            nonce,
            attempt: 0,
            vertices,
            edges: edges.into_iter().collect(),
            payload_bytes: 0,
        };
        tx.id = tx_digest(&tx);
        tx
    }

    /// The same transaction with the next attempt number and a fresh id.
    pub fn retry(&self) -> TransactionDag {
        let mut tx = self.clone();
        tx.attempt += 1;
        tx.id = tx_digest(&tx);
        tx
    }

    pub fn encode_body(&self, enc: &mut Encoder) {
        enc.u64(self.nonce);
        enc.u32(self.attempt);
        enc.u32(self.vertices.len() as u32);
        for v in &self.vertices {
            enc.var(v.object.as_bytes());
            enc.u8(v.op.tag());
            enc.i64(v.amount);
            encode_condition(enc, v.condition);
            v.owner_sig.encode(enc);
        }
        enc.u32(self.edges.len() as u32);
        for &(a, b) in &self.edges {
            enc.u32(a);
            enc.u32(b);
        }
    }

    /// Canonical encoding including the id.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(&self.id.0);
        self.encode_body(&mut enc);
        enc.into_bytes()
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectKey> {
        self.vertices.iter().map(|v| &v.object)
    }
}

pub fn tx_digest(tx: &TransactionDag) -> TxDigest {
    let mut enc = Encoder::new();
    enc.raw(b"hydra/tx");
    tx.encode_body(&mut enc);
    TxDigest(sha256(enc.bytes()))
}

pub fn validate_tx(tx: &TransactionDag, keys: &Keyring) -> bool {
    if tx.vertices.is_empty() || tx_digest(tx) != tx.id {
        return false;
    }
    let n = tx.vertices.len() as u32;
    if tx.edges.iter().any(|&(a, b)| a >= n || b >= n) {
        return false;
    }
    if toposort(tx).is_err() {
        return false;
    }
    tx.vertices.iter().all(|v| {
        let payload = Vertex::signed_payload(tx.nonce, &v.object, v.op, v.amount, v.condition);
        keys.verify(&v.owner_sig, &payload)
    })
}

/// Kahn's algorithm; ready vertices are taken in ascending index order.
pub fn toposort(tx: &TransactionDag) -> Result<Vec<usize>> {
    let n = tx.vertices.len();
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in &tx.edges {
        let (a, b) = (a as usize, b as usize);
        if a >= n || b >= n {
            return Err(HydraError::Cycle);
        }
        succ[a].push(b);
        indeg[b] += 1;
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut out = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        out.push(v);
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    if out.len() != n {
        return Err(HydraError::Cycle);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub txs: Vec<Arc<TransactionDag>>,
    pub ins: InstanceId,
    pub sn: SeqNum,
    /// Proposer's state vector when the block was cut.
    pub attest: Vec<i64>,
    pub sig: Authenticator,
    /// Simulation metadata; not part of the encoding.
    pub proposed_at_us: u64,
}

impl Block {
    pub fn encode_body(&self, enc: &mut Encoder) {
        enc.u32(self.ins);
        enc.u64(self.sn);
        enc.u32(self.attest.len() as u32);
        for &a in &self.attest {
            enc.i64(a);
        }
        enc.u32(self.txs.len() as u32);
        for tx in &self.txs {
            enc.raw(&tx.id.0);
        }
    }

    pub fn body_digest(&self) -> [u8; 32] {
        let mut enc = Encoder::new();
        enc.raw(b"hydra/block");
        self.encode_body(&mut enc);
        sha256(enc.bytes())
    }

    pub fn sign(mut self, keys: &Keyring, leader: ReplicaId) -> Block {
        self.sig = keys.sign(Party::Replica(leader), &self.body_digest());
        self
    }

    pub fn verify(&self, keys: &Keyring) -> bool {
        keys.verify(&self.sig, &self.body_digest())
    }

    pub fn is_noop(&self) -> bool {
        self.txs.is_empty()
    }

    pub fn empty(ins: InstanceId, sn: SeqNum) -> Block {
        Block {
            txs: Vec::new(),
            ins,
            sn,
            attest: Vec::new(),
            sig: Authenticator {
                signer: Party::Replica(0),
                tag: [0; 32],
            },
            proposed_at_us: 0,
        }
    }
}

/// Per-instance highest contiguously delivered sequence number.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SystemState {
    pub frontier: Vec<i64>,
}

impl SystemState {
    pub fn empty(m: usize) -> Self {
        SystemState {
            frontier: vec![NONE_SN; m],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys() -> Keyring {
        Keyring::new(7)
    }

    fn chain() -> TransactionDag {
        TransactionDag::build(
            &keys(),
            Party::Client(0),
            1,
            vec![
                VertexSpec::new("A", Op::Sub, 10),
                VertexSpec::new("B", Op::Add, 10),
            ],
            [(0, 1)],
        )
    }

    #[test]
    fn valid_chain() {
        assert!(validate_tx(&chain(), &keys()));
    }

    #[test]
    fn two_cycle_rejected() {
        let mut tx = chain();
        tx.edges.insert((1, 0));
        tx.id = tx_digest(&tx);
        assert!(!validate_tx(&tx, &keys()));
    }

    #[test]
    fn forged_owner_sig_rejected() {
        let tx = chain();
        assert!(!validate_tx(&tx, &Keyring::new(8)));
    }

    #[test]
    fn toposort_tie_break() {
        let tx = TransactionDag::build(
            &keys(),
            Party::Client(0),
            2,
            vec![
                VertexSpec::new("A", Op::Set, 1),
                VertexSpec::new("B", Op::Set, 2),
                VertexSpec::new("C", Op::Set, 3),
            ],
            [],
        );
        assert_eq!(toposort(&tx).unwrap(), vec![0, 1, 2]);
        assert_eq!(toposort(&chain()).unwrap(), vec![0, 1]);
    }

    #[test]
    fn sub_default_threshold() {
        let v = chain().vertices[0].clone();
        assert_eq!(v.apply(100), Some(90));
        assert_eq!(v.apply(5), None);
        assert_eq!(v.apply(10), Some(0));
    }

    #[test]
    fn empty_key_rejected() {
        assert!(ObjectKey::new(Vec::<u8>::new()).is_err());
    }
}
