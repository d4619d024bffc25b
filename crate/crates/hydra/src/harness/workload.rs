//! Transfer workload with an exact cross-instance fraction.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HydraError, Result};
use crate::harness::config::WorkloadConfig;
use crate::model::{Keyring, ObjectKey, Op, Party, TransactionDag, VertexSpec};
use crate::partitioner::{assign, instances_of};

pub const CLIENT: Party = Party::Client(0);

pub fn object_name(k: usize) -> ObjectKey {
    ObjectKey::new(format!("obj{k}")).expect("non-empty")
}

/// Generates `tx_count` transfers. Exactly `round(ratio * tx_count)` of them
/// span two or more instances; which ones is a seeded shuffle.
pub fn generate_workload(cfg: &WorkloadConfig, m: u32, seed: u64, keys: &Keyring) -> Result<Vec<Arc<TransactionDag>>> {
    let k = cfg.objects_per_tx;
    if cfg.object_universe < 2 * k {
        return Err(HydraError::config("workload.object_universe", "must be at least 2 * objects_per_tx"));
    }
    let cross = (cfg.cross_ratio * cfg.tx_count as f64).round() as usize;
    if cross > 0 && (m < 2 || k < 2) {
        return Err(HydraError::Unsatisfiable(format!(
            "cross-instance ratio {} needs m >= 2 and objects_per_tx >= 2 (m = {m}, objects_per_tx = {k})",
            cfg.cross_ratio
        )));
    }
    let objects: Vec<ObjectKey> = (0..cfg.object_universe).map(object_name).collect();
    let mut by_instance: Vec<Vec<ObjectKey>> = vec![Vec::new(); m as usize];
    for o in &objects {
        by_instance[assign(o, m) as usize].push(o.clone());
    }
    let intra_pool: Vec<usize> = (0..m as usize).filter(|&i| by_instance[i].len() >= k).collect();
    if cross < cfg.tx_count && intra_pool.is_empty() {
        return Err(HydraError::Unsatisfiable(format!(
            "no instance owns {k} objects; grow object_universe"
        )));
    }
    if cross > 0 && by_instance.iter().filter(|b| !b.is_empty()).count() < 2 {
        return Err(HydraError::Unsatisfiable("all objects map to one instance".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3017_c0de);
    let mut is_cross = vec![false; cfg.tx_count];
    is_cross[..cross].iter_mut().for_each(|c| *c = true);
    is_cross.shuffle(&mut rng);

    let mut out = Vec::with_capacity(cfg.tx_count);
    for (nonce, &want_cross) in is_cross.iter().enumerate() {
        let picked: Vec<ObjectKey> = if want_cross {
            loop {
                let pick: Vec<ObjectKey> = objects.choose_multiple(&mut rng, k).cloned().collect();
                let span: std::collections::BTreeSet<_> = pick.iter().map(|o| assign(o, m)).collect();
                if span.len() >= 2 {
                    break pick;
                }
            }
        } else {
            let i = intra_pool[rng.gen_range(0..intra_pool.len())];
            by_instance[i].choose_multiple(&mut rng, k).cloned().collect()
        };
        let mut specs = vec![VertexSpec::new(picked[0].clone(), Op::Sub, cfg.amount)];
        specs.extend(picked[1..].iter().map(|o| VertexSpec::new(o.clone(), Op::Add, cfg.amount)));
        let edges: Vec<(u32, u32)> = (1..k as u32).map(|j| (0, j)).collect();
        let mut tx = TransactionDag::build(keys, CLIENT, nonce as u64, specs, edges);
        tx.payload_bytes = cfg.payload_bytes;
        debug_assert_eq!(instances_of(&tx, m).len() >= 2, want_cross);
        out.push(Arc::new(tx));
    }
    Ok(out)
}
