//! Bit-exact encodings, checked against byte layouts assembled by hand here
//! and against pinned digests.

use std::sync::Arc;

use hydra::model::{Authenticator, Block, Keyring, ObjectKey, Op, Party, TransactionDag, VertexSpec};
use hydra::partitioner::assign;
use hydra::sb::{PrePrepare, SbMsg, Vote, VoteKind};
use sha2::{Digest, Sha256};

fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Keyed tag: sha256(party key || payload length || payload), where the
/// party key is sha256("hydra/key" || seed || party).
fn oracle_tag(seed: u64, client: u32, payload: &[u8]) -> [u8; 32] {
    let mut party = vec![1u8];
    party.extend(client.to_be_bytes());
    let key = sha(&[b"hydra/key", &seed.to_be_bytes(), &party]);
    sha(&[&key, &(payload.len() as u64).to_be_bytes(), payload])
}

fn vertex_payload(nonce: u64, object: &str, op: u8, amount: i64) -> Vec<u8> {
    let mut b = b"hydra/vertex".to_vec();
    b.extend(nonce.to_be_bytes());
    b.extend((object.len() as u32).to_be_bytes());
    b.extend(object.as_bytes());
    b.push(op);
    b.extend(amount.to_be_bytes());
    b.push(0);
    b
}

fn transfer() -> TransactionDag {
    TransactionDag::build(
        &Keyring::new(1),
        Party::Client(0),
        5,
        vec![VertexSpec::new("alice", Op::Sub, 10), VertexSpec::new("bob", Op::Add, 10)],
        [(0, 1)],
    )
}

#[test]
fn transaction_encoding_matches_hand_layout() {
    let tx = transfer();
    let mut body = Vec::new();
    body.extend(5u64.to_be_bytes());
    body.extend(0u32.to_be_bytes());
    body.extend(2u32.to_be_bytes());
    for (obj, op) in [("alice", 2u8), ("bob", 1u8)] {
        body.extend((obj.len() as u32).to_be_bytes());
        body.extend(obj.as_bytes());
        body.push(op);
        body.extend(10i64.to_be_bytes());
        body.push(0);
        body.push(1);
        body.extend(0u32.to_be_bytes());
        body.extend(oracle_tag(1, 0, &vertex_payload(5, obj, op, 10)));
    }
    body.extend(1u32.to_be_bytes());
    body.extend(0u32.to_be_bytes());
    body.extend(1u32.to_be_bytes());
    let id = sha(&[b"hydra/tx", &body]);
    assert_eq!(tx.id.0, id);
    let mut wire = id.to_vec();
    wire.extend(&body);
    assert_eq!(tx.encode(), wire);
}

#[test]
fn transaction_digests_are_pinned() {
    let tx = transfer();
    assert_eq!(
        tx.id.to_hex(),
        "af76797c707f6597aec67a70b94abedd51f091afdeb6275eb1f7ac81ab280294"
    );
    assert_eq!(
        tx.retry().id.to_hex(),
        "41b42c84173938bc0da1d0b2a105fe2e067ea028f1792647a9d967feb90f776c"
    );
}

fn block() -> Block {
    Block {
        txs: vec![Arc::new(transfer())],
        attest: vec![3, -1],
        ..Block::empty(1, 4)
    }
}

fn block_body() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(1u32.to_be_bytes());
    b.extend(4u64.to_be_bytes());
    b.extend(2u32.to_be_bytes());
    b.extend(3i64.to_be_bytes());
    b.extend((-1i64).to_be_bytes());
    b.extend(1u32.to_be_bytes());
    b.extend(transfer().id.0);
    b
}

#[test]
fn block_digest_matches_hand_layout() {
    assert_eq!(block().body_digest(), sha(&[b"hydra/block", &block_body()]));
}

fn no_sig() -> Authenticator {
    Authenticator {
        signer: Party::Replica(2),
        tag: [0x5a; 32],
    }
}

fn sig_bytes() -> Vec<u8> {
    let mut b = vec![0u8];
    b.extend(2u32.to_be_bytes());
    b.extend([0x5a; 32]);
    b
}

#[test]
fn vote_encodings() {
    for (kind, tag) in [(VoteKind::Prepare, 2u8), (VoteKind::Commit, 3u8)] {
        let msg = SbMsg::Vote(Vote {
            kind,
            ins: 2,
            view: 1,
            sn: 7,
            digest: [0xab; 32],
            replica: 3,
            sig: no_sig(),
        });
        let mut want = vec![tag];
        want.extend(2u32.to_be_bytes());
        want.extend(1u64.to_be_bytes());
        want.extend(7u64.to_be_bytes());
        want.extend([0xab; 32]);
        want.extend(3u32.to_be_bytes());
        assert_eq!(msg.signed_bytes(), want);
        want.extend(sig_bytes());
        assert_eq!(msg.encode(), want);
    }
}

#[test]
fn pre_prepare_encoding() {
    let msg = SbMsg::PrePrepare(PrePrepare {
        ins: 1,
        view: 0,
        sn: 4,
        block: Arc::new(block()),
        sig: no_sig(),
    });
    let mut want = vec![1u8];
    want.extend(1u32.to_be_bytes());
    want.extend(0u64.to_be_bytes());
    want.extend(4u64.to_be_bytes());
    want.extend(block_body());
    want.extend(sig_bytes());
    assert_eq!(msg.encode(), want);
}

/// 64-bit FNV-1a.
fn oracle_fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[test]
fn assignment_of_single_letters() {
    let got: Vec<u32> = (b'A'..=b'Z')
        .map(|c| assign(&ObjectKey::new(vec![c]).unwrap(), 4))
        .collect();
    let oracle: Vec<u32> = (b'A'..=b'Z').map(|c| (oracle_fnv(&[c]) % 4) as u32).collect();
    assert_eq!(got, oracle);
    let pinned = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
    assert_eq!(got, pinned);
}
