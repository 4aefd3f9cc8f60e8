//! Thread-safe facade over a store, an embedder and a config.
//!
//! Reads (`retrieve`, `get`, `stats`) take a shared lock on the store, writes
//! (`insert`, `feedback`) take the exclusive lock, so a reader sees every
//! triplet either entirely before or entirely after an update.

use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{MemrlError, Result};
use crate::learning::{apply_feedback_ids, UtilityUpdate};
use crate::metrics::{q_bin_composition, QBin};
use crate::retrieval::{retrieve_with_policy, IntentQuery, RetrievalContext, RetrievalParams};
use crate::store::{MemoryStore, MemoryTriplet, OutcomeLabel, Replay};

/// An intent given either as raw text (embedded server-side) or as a
/// precomputed unit vector.
#[derive(Debug, Clone, PartialEq)]
pub enum IntentInput {
    Text(String),
    Embedding(Vec<f64>),
}

/// Per-request retrieval overrides; unset fields fall back to the config.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalOverrides {
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
}

impl RetrievalOverrides {
    pub fn apply(&self, mut params: RetrievalParams) -> RetrievalParams {
        if let Some(v) = self.lambda {
            params.lambda = v;
        }
        if let Some(v) = self.delta {
            params.delta = v;
        }
        if let Some(v) = self.k1 {
            params.k1 = v;
        }
        if let Some(v) = self.k2 {
            params.k2 = v;
        }
        params
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub total: u64,
    pub touched: usize,
    pub max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub bank_size: usize,
    pub update_counts: UpdateCounts,
    pub q_histogram: Vec<QBin>,
}

/// Bin width of the utility histogram reported by [`MemoryEngine::stats`].
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.2;

pub struct MemoryEngine {
    config: EngineConfig,
    embedder: Arc<dyn Embedder>,
    store: RwLock<MemoryStore>,
    rng: Mutex<ChaCha8Rng>,
    recovery: Option<Replay>,
}

impl std::fmt::Debug for MemoryEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryEngine")
            .field("config", &self.config)
            .field("bank_size", &self.store.read().len())
            .finish_non_exhaustive()
    }
}

impl MemoryEngine {
    /// Builds the embedder from the config and opens the journal at
    /// `config.journal_path`, or keeps the bank in memory when unset.
    pub fn open(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let embedder: Arc<dyn Embedder> = Arc::from(config.embedding.build()?);
        let dim = embedder.dim();
        let (store, recovery) = match &config.journal_path {
            Some(path) => {
                let (store, replay) = MemoryStore::open(path, dim)?;
                if let Some(offset) = replay.stopped_at {
                    tracing::warn!(
                        offset,
                        reason = replay.stop_reason.as_deref().unwrap_or(""),
                        "journal replay stopped early; tail discarded"
                    );
                }
                (store, Some(replay))
            }
            None => (MemoryStore::in_memory(dim), None),
        };
        let mut engine = Self::from_parts(config, embedder, store)?;
        engine.recovery = recovery;
        Ok(engine)
    }

    pub fn from_parts(
        config: EngineConfig,
        embedder: Arc<dyn Embedder>,
        store: MemoryStore,
    ) -> Result<Self> {
        config.validate()?;
        if embedder.dim() != store.dim() {
            return Err(MemrlError::InvalidDimension {
                expected: store.dim(),
                actual: embedder.dim(),
            });
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            embedder,
            store: RwLock::new(store),
            rng: Mutex::new(rng),
            recovery: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Replay outcome when the engine was opened from a journal.
    pub fn recovery(&self) -> Option<&Replay> {
        self.recovery.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn resolve(&self, input: &IntentInput) -> Result<IntentQuery> {
        match input {
            IntentInput::Text(text) => Ok(IntentQuery::new(text.clone(), self.embedder.embed(text)?)),
            IntentInput::Embedding(values) => {
                if values.len() != self.dim() {
                    return Err(MemrlError::InvalidDimension {
                        expected: self.dim(),
                        actual: values.len(),
                    });
                }
                Ok(IntentQuery::new(String::new(), EmbeddingVector::from_unit(values.clone())?))
            }
        }
    }

    pub fn insert(
        &self,
        intent: &IntentInput,
        experience: &str,
        outcome_label: OutcomeLabel,
        q_init: Option<f64>,
    ) -> Result<u64> {
        let query = self.resolve(intent)?;
        let q = q_init.unwrap_or(self.config.q_init);
        self.store.write().insert_triplet(
            &query.text,
            &query.embedding,
            experience,
            q,
            outcome_label,
        )
    }

    pub fn retrieve(
        &self,
        intent: &IntentInput,
        overrides: &RetrievalOverrides,
    ) -> Result<RetrievalContext> {
        let query = self.resolve(intent)?;
        self.retrieve_query(&query, overrides)
    }

    pub fn retrieve_query(
        &self,
        query: &IntentQuery,
        overrides: &RetrievalOverrides,
    ) -> Result<RetrievalContext> {
        let params = overrides.apply(self.config.retrieval_params());
        params.validate()?;
        let store = self.store.read();
        retrieve_with_policy(
            store.bank(),
            query,
            params,
            self.config.policy,
            self.config.temperature,
            &mut *self.rng.lock(),
        )
    }

    /// Applies one reward to each id with the configured update rule.
    pub fn feedback(&self, ids: &[u64], reward: f64) -> Result<Vec<UtilityUpdate>> {
        let cfg = self.config.learning();
        apply_feedback_ids(&mut self.store.write(), ids, reward, &cfg, 0.0)
    }

    pub fn get(&self, id: u64) -> Option<MemoryTriplet> {
        self.store.read().get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.store.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` against a consistent view of the bank.
    pub fn with_store<R>(&self, f: impl FnOnce(&MemoryStore) -> R) -> R {
        f(&self.store.read())
    }

    pub fn stats(&self) -> Result<EngineStats> {
        let store = self.store.read();
        let bank = store.bank();
        let triplets = bank.triplets();
        let update_counts = UpdateCounts {
            total: triplets.iter().map(|t| t.update_count).sum(),
            touched: triplets.iter().filter(|t| t.update_count > 0).count(),
            max: triplets.iter().map(|t| t.update_count).max().unwrap_or(0),
        };
        Ok(EngineStats {
            bank_size: bank.len(),
            update_counts,
            q_histogram: q_bin_composition(bank, HISTOGRAM_BIN_WIDTH)?,
        })
    }

    pub fn flush(&self) -> Result<()> {
        self.store.write().flush()
    }
}
