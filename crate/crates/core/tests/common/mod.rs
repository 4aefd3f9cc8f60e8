#![allow(dead_code)]

use memrl_core::retrieval::PoolEntry;
use memrl_core::CandidatePool;
use rand::Rng;

/// A random pool of 1..=8 entries. Half the pools draw values from a coarse
/// grid so exact ties in similarity and utility are common.
pub fn random_pool<R: Rng>(rng: &mut R) -> CandidatePool {
    let n = rng.random_range(1..=8);
    let coarse = rng.random_bool(0.5);
    let mut draw = |lo: f64, hi: f64| {
        if coarse {
            let steps = rng.random_range(0..=4) as f64;
            lo + (hi - lo) * steps / 4.0
        } else {
            rng.random_range(lo..=hi)
        }
    };
    let entries = (0..n)
        .map(|i| PoolEntry {
            triplet_id: i as u64 * 3 + 1,
            similarity: draw(0.3, 1.0),
            raw_q: draw(-1.0, 1.0),
        })
        .collect();
    CandidatePool::new(entries)
}

pub fn map_pool(pool: &CandidatePool, f: impl Fn(&PoolEntry) -> PoolEntry) -> CandidatePool {
    CandidatePool::new(pool.entries.iter().map(f).collect())
}

/// Ids sorted by (key desc, similarity desc, id asc).
pub fn order_by(pool: &CandidatePool, key: impl Fn(&PoolEntry) -> f64) -> Vec<u64> {
    let mut e = pool.entries.clone();
    e.sort_by(|a, b| {
        key(b)
            .total_cmp(&key(a))
            .then(b.similarity.total_cmp(&a.similarity))
            .then(a.triplet_id.cmp(&b.triplet_id))
    });
    e.into_iter().map(|x| x.triplet_id).collect()
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
