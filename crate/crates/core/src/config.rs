//! Engine configuration.
//!
//! Config files are JSON. Unknown keys are rejected so that a typo in a
//! parameter name fails loudly instead of silently running with a default.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{DeterministicEmbedder, Embedder, RemoteEmbedder};
use crate::error::{MemrlError, Result};
use crate::learning::{LearningConfig, UpdateMode};
use crate::retrieval::RetrievalParams;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Zscore,
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimGate {
    #[default]
    On,
    Off,
}

/// How a memory is chosen from the Phase-A pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalPolicy {
    /// Z-score fusion, top-`k2`.
    #[default]
    TwoPhase,
    /// Highest raw utility only.
    Greedy,
    /// One sample from the similarity-prior-weighted Boltzmann distribution.
    Boltzmann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    Deterministic {
        dim: usize,
        seed: u64,
    },
    Remote {
        endpoint: String,
        model: String,
        dim: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Deterministic { dim: 64, seed: 0 }
    }
}

impl EmbeddingConfig {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingConfig::Deterministic { dim, .. } | EmbeddingConfig::Remote { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbeddingConfig::Deterministic { dim, seed } => {
                Box::new(DeterministicEmbedder::new(*dim, *seed)?)
            }
            EmbeddingConfig::Remote {
                endpoint,
                model,
                dim,
                timeout_ms,
            } => Box::new(RemoteEmbedder::new(
                endpoint.clone(),
                model.clone(),
                *dim,
                Duration::from_millis(*timeout_ms),
            )?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub k1: usize,
    pub k2: usize,
    pub q_init: f64,
    /// Multiplier on utility in the Boltzmann policy.
    pub temperature: f64,
    pub update_mode: UpdateMode,
    pub normalization: Normalization,
    pub sim_gate: SimGate,
    pub store_failures: bool,
    pub policy: RetrievalPolicy,
    pub embedding: EmbeddingConfig,
    pub journal_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let learning = LearningConfig::default();
        let retrieval = RetrievalParams::default();
        Self {
            alpha: learning.alpha,
            gamma: learning.gamma,
            lambda: retrieval.lambda,
            delta: retrieval.delta,
            k1: retrieval.k1,
            k2: retrieval.k2,
            q_init: learning.q_init,
            temperature: 1.0,
            update_mode: learning.update_mode,
            normalization: retrieval.normalization,
            sim_gate: SimGate::On,
            store_failures: learning.store_failures,
            policy: RetrievalPolicy::TwoPhase,
            embedding: EmbeddingConfig::default(),
            journal_path: None,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| MemrlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MemrlError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: MemrlError| MemrlError::Config(e.to_string());
        self.retrieval_params().validate().map_err(wrap)?;
        self.learning().validate().map_err(wrap)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MemrlError::Config("temperature must be positive".into()));
        }
        if self.embedding.dim() < 2 {
            return Err(MemrlError::Config("embedding dim must be at least 2".into()));
        }
        Ok(())
    }

    pub fn retrieval_params(&self) -> RetrievalParams {
        RetrievalParams {
            lambda: self.lambda,
            delta: self.delta,
            k1: self.k1,
            k2: self.k2,
            normalization: self.normalization,
            sim_gate: self.sim_gate == SimGate::On,
        }
    }

    pub fn learning(&self) -> LearningConfig {
        LearningConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            q_init: self.q_init,
            update_mode: self.update_mode,
            store_failures: self.store_failures,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        hash_json(self)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
