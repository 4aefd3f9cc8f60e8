//! Episodic memory engine for agents that learn at runtime without touching
//! model weights.
//!
//! Memories are Intent-Experience-Utility triplets. Retrieval runs in two
//! phases: a similarity-gated recall (`retrieval::phase_a_recall`) followed by
//! a value-aware re-ranking that fuses z-scored similarity with z-scored
//! utility (`retrieval::phase_b_select`). After the environment reports a
//! reward, the utilities of the injected memories move toward it with a
//! constant-step-size update (`learning::mc_update`), and the new trajectory is
//! written back into the bank.
//!
//! The `simulation` and `metrics` modules provide a deterministic synthetic
//! harness for checking convergence, variance and retrieval-policy behaviour.

pub mod config;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod learning;
pub mod metrics;
pub mod retrieval;
pub mod simulation;
pub mod store;

pub use config::{EngineConfig, EmbeddingConfig, Normalization, RetrievalPolicy, SimGate};
pub use embedding::{cosine_similarity, embed_deterministic, EmbeddingVector};
pub use engine::{IntentInput, MemoryEngine};
pub use error::{MemrlError, Result};
pub use learning::{mc_update, td_update, LearningConfig, RewardSignal, UpdateMode};
pub use retrieval::{CandidatePool, IntentQuery, RetrievalContext, ScoredCandidate};
pub use store::{MemoryBank, MemoryStore, MemoryTriplet, OutcomeLabel};
