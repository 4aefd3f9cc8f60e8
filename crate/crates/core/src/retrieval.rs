//! Two-phase retrieval.
//!
//! Phase A keeps the `k1` most similar memories whose cosine similarity is
//! strictly above `delta`. Phase B z-scores similarity and utility inside that
//! pool, fuses them as `(1 - lambda) * sim_z + lambda * q_z` and keeps the top
//! `k2`. Ties are broken by higher raw similarity, then by lower id.
//!
//! Z-scores are snapped to a 2^-32 grid before fusion. Ranking is invariant
//! under positive affine maps of either input in exact arithmetic; snapping
//! keeps that true in floating point, so structural ties (for example the two
//! entries of a two-item pool at `lambda = 0.5`) stay exact ties.

use std::cmp::Ordering;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Normalization, RetrievalPolicy};
use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::error::{MemrlError, Result};
use crate::store::MemoryBank;

/// Pool-level standard deviation below which z-scores collapse to zero.
pub const DEGENERATE_STD: f64 = 1e-12;

const Z_GRID: f64 = 4_294_967_296.0; // 2^32

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentQuery {
    pub text: String,
    pub embedding: EmbeddingVector,
}

impl IntentQuery {
    pub fn new(text: impl Into<String>, embedding: EmbeddingVector) -> Self {
        Self {
            text: text.into(),
            embedding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub triplet_id: u64,
    pub similarity: f64,
    pub raw_q: f64,
}

/// Phase-A survivors, ordered by similarity descending then id ascending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub entries: Vec<PoolEntry>,
}

impl CandidatePool {
    pub fn new(entries: Vec<PoolEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub triplet_id: u64,
    pub similarity: f64,
    pub raw_q: f64,
    /// Normalized similarity (the raw similarity when normalization is off).
    pub sim_z: f64,
    /// Normalized utility (the raw utility when normalization is off).
    pub q_z: f64,
    pub score: f64,
}

/// Retrieval knobs captured with every context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub lambda: f64,
    pub delta: f64,
    pub k1: usize,
    pub k2: usize,
    pub normalization: Normalization,
    /// When false the similarity threshold is not applied.
    pub sim_gate: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            delta: 0.3,
            k1: 5,
            k2: 3,
            normalization: Normalization::Zscore,
            sim_gate: true,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MemrlError::invalid(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(MemrlError::invalid(format!("delta {} not in [0, 1)", self.delta)));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(MemrlError::invalid("k1 and k2 must be at least 1"));
        }
        Ok(())
    }
}

/// The injected memories for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalContext {
    pub selected: Vec<ScoredCandidate>,
    pub query: IntentQuery,
    pub params: RetrievalParams,
    pub pool_size: usize,
}

impl RetrievalContext {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.selected.iter().map(|c| c.triplet_id).collect()
    }

    pub fn top(&self) -> Option<&ScoredCandidate> {
        self.selected.first()
    }
}

fn recall(
    bank: &MemoryBank,
    query: &EmbeddingVector,
    delta: Option<f64>,
    k1: usize,
) -> Result<CandidatePool> {
    if query.dim() != bank.dim() {
        return Err(MemrlError::InvalidDimension {
            expected: bank.dim(),
            actual: query.dim(),
        });
    }
    let mut entries = Vec::new();
    for t in bank.triplets() {
        let similarity = cosine_similarity(query, &t.intent_embedding)?;
        if delta.is_none_or(|d| similarity > d) {
            entries.push(PoolEntry {
                triplet_id: t.id,
                similarity,
                raw_q: t.utility,
            });
        }
    }
    entries.sort_by(|a, b| {
        cmp_f64(b.similarity, a.similarity)
            .then(a.triplet_id.cmp(&b.triplet_id))
    });
    entries.truncate(k1);
    Ok(CandidatePool { entries })
}

/// Phase A: top-`k1` memories with similarity strictly greater than `delta`.
pub fn phase_a_recall(
    bank: &MemoryBank,
    query: &IntentQuery,
    delta: f64,
    k1: usize,
) -> Result<CandidatePool> {
    if !(0.0..1.0).contains(&delta) {
        return Err(MemrlError::invalid(format!("delta {delta} not in [0, 1)")));
    }
    if k1 == 0 {
        return Err(MemrlError::invalid("k1 must be at least 1"));
    }
    recall(bank, &query.embedding, Some(delta), k1)
}

/// Phase A with the similarity gate switched off: the `k1` most similar
/// memories regardless of threshold.
pub fn phase_a_recall_ungated(
    bank: &MemoryBank,
    query: &IntentQuery,
    k1: usize,
) -> Result<CandidatePool> {
    if k1 == 0 {
        return Err(MemrlError::invalid("k1 must be at least 1"));
    }
    recall(bank, &query.embedding, None, k1)
}

/// Population z-scores. Collapses to all zeros when the standard deviation is
/// below [`DEGENERATE_STD`], which covers single-element input.
pub fn z_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(MemrlError::invalid("cannot normalize an empty list"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MemrlError::invalid("values must be finite"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

// Inputs are finite, so this only differs from `total_cmp` in treating
// -0.0 and +0.0 as equal.
fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

fn snap(z: f64) -> f64 {
    (z * Z_GRID).round() / Z_GRID
}

fn rank(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    cmp_f64(b.score, a.score)
        .then(cmp_f64(b.similarity, a.similarity))
        .then(a.triplet_id.cmp(&b.triplet_id))
}

/// Scores every pool entry and returns them fully ranked.
pub fn score_pool(
    pool: &CandidatePool,
    lambda: f64,
    normalization: Normalization,
) -> Result<Vec<ScoredCandidate>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MemrlError::invalid(format!("lambda {lambda} not in [0, 1]")));
    }
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let sims: Vec<f64> = pool.entries.iter().map(|e| e.similarity).collect();
    let qs: Vec<f64> = pool.entries.iter().map(|e| e.raw_q).collect();
    let (sim_n, q_n) = match normalization {
        Normalization::Zscore => (
            z_normalize(&sims)?.into_iter().map(snap).collect::<Vec<_>>(),
            z_normalize(&qs)?.into_iter().map(snap).collect::<Vec<_>>(),
        ),
        Normalization::None => (sims, qs),
    };
    let mut scored: Vec<ScoredCandidate> = pool
        .entries
        .iter()
        .zip(sim_n.iter().zip(&q_n))
        .map(|(e, (&sim_z, &q_z))| ScoredCandidate {
            triplet_id: e.triplet_id,
            similarity: e.similarity,
            raw_q: e.raw_q,
            sim_z,
            q_z,
            score: (1.0 - lambda) * sim_z + lambda * q_z,
        })
        .collect();
    scored.sort_by(rank);
    Ok(scored)
}

/// Phase B with z-score fusion: the top-`k2` entries by composite score.
pub fn phase_b_select(
    pool: &CandidatePool,
    query: &IntentQuery,
    lambda: f64,
    k2: usize,
) -> Result<RetrievalContext> {
    let params = RetrievalParams {
        lambda,
        k2,
        k1: pool.len().max(1),
        ..RetrievalParams::default()
    };
    select_with(pool, query, params)
}

/// Phase B under explicit params (normalization mode included).
pub fn select_with(
    pool: &CandidatePool,
    query: &IntentQuery,
    params: RetrievalParams,
) -> Result<RetrievalContext> {
    if params.k2 == 0 {
        return Err(MemrlError::invalid("k2 must be at least 1"));
    }
    let mut selected = score_pool(pool, params.lambda, params.normalization)?;
    selected.truncate(params.k2);
    Ok(RetrievalContext {
        selected,
        query: query.clone(),
        params,
        pool_size: pool.len(),
    })
}

/// Full two-phase retrieval against a bank.
pub fn retrieve(
    bank: &MemoryBank,
    query: &IntentQuery,
    params: RetrievalParams,
) -> Result<RetrievalContext> {
    params.validate()?;
    let pool = if params.sim_gate {
        phase_a_recall(bank, query, params.delta, params.k1)?
    } else {
        phase_a_recall_ungated(bank, query, params.k1)?
    };
    select_with(&pool, query, params)
}

/// Greedy policy: argmax raw utility; ties by higher similarity, then lower id.
pub fn select_greedy(pool: &CandidatePool) -> Result<u64> {
    pool.entries
        .iter()
        .min_by(|a, b| {
            cmp_f64(b.raw_q, a.raw_q)
                .then(cmp_f64(b.similarity, a.similarity))
                .then(a.triplet_id.cmp(&b.triplet_id))
        })
        .map(|e| e.triplet_id)
        .ok_or(MemrlError::EmptyPool)
}

/// Selection probabilities proportional to `softmax(sim) * exp(temperature * q)`.
///
/// `temperature` multiplies utility (it plays the role of an inverse
/// temperature); as it approaches zero the distribution approaches the
/// similarity softmax alone.
pub fn boltzmann_distribution(pool: &CandidatePool, temperature: f64) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(MemrlError::EmptyPool);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(MemrlError::invalid("temperature must be positive and finite"));
    }
    let logits: Vec<f64> = pool
        .entries
        .iter()
        .map(|e| e.similarity + temperature * e.raw_q)
        .collect();
    Ok(softmax(&logits))
}

/// The similarity prior: softmax over pool similarities.
pub fn similarity_prior(pool: &CandidatePool) -> Vec<f64> {
    let sims: Vec<f64> = pool.entries.iter().map(|e| e.similarity).collect();
    softmax(&sims)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Samples one id from [`boltzmann_distribution`].
pub fn sample_boltzmann<R: Rng + ?Sized>(
    pool: &CandidatePool,
    temperature: f64,
    rng: &mut R,
) -> Result<u64> {
    let probs = boltzmann_distribution(pool, temperature)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (entry, p) in pool.entries.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return Ok(entry.triplet_id);
        }
    }
    Ok(pool.entries[pool.len() - 1].triplet_id)
}

/// Seeded single draw from the Boltzmann policy.
pub fn select_boltzmann(pool: &CandidatePool, temperature: f64, rng_seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_boltzmann(pool, temperature, &mut rng)
}

/// Retrieval under any policy. Greedy and Boltzmann pick one memory from the
/// Phase-A pool; two-phase ignores `rng`.
pub fn retrieve_with_policy<R: Rng + ?Sized>(
    bank: &MemoryBank,
    query: &IntentQuery,
    params: RetrievalParams,
    policy: RetrievalPolicy,
    temperature: f64,
    rng: &mut R,
) -> Result<RetrievalContext> {
    if policy == RetrievalPolicy::TwoPhase {
        return retrieve(bank, query, params);
    }
    params.validate()?;
    let pool = if params.sim_gate {
        phase_a_recall(bank, query, params.delta, params.k1)?
    } else {
        phase_a_recall_ungated(bank, query, params.k1)?
    };
    if pool.is_empty() {
        return Ok(RetrievalContext {
            selected: Vec::new(),
            query: query.clone(),
            params,
            pool_size: 0,
        });
    }
    let chosen = match policy {
        RetrievalPolicy::Greedy => select_greedy(&pool)?,
        _ => sample_boltzmann(&pool, temperature, rng)?,
    };
    Ok(context_for_choice(&pool, query, params, chosen))
}

/// Builds a single-entry context for a memory chosen by a non-Phase-B policy.
pub fn context_for_choice(
    pool: &CandidatePool,
    query: &IntentQuery,
    params: RetrievalParams,
    chosen: u64,
) -> RetrievalContext {
    let selected = pool
        .entries
        .iter()
        .find(|e| e.triplet_id == chosen)
        .map(|e| ScoredCandidate {
            triplet_id: e.triplet_id,
            similarity: e.similarity,
            raw_q: e.raw_q,
            sim_z: e.similarity,
            q_z: e.raw_q,
            score: e.raw_q,
        })
        .into_iter()
        .collect();
    RetrievalContext {
        selected,
        query: query.clone(),
        params,
        pool_size: pool.len(),
    }
}
