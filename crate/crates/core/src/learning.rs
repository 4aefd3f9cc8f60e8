//! Utility updates and trajectory write-back.

use serde::{Deserialize, Serialize};

use crate::error::{MemrlError, Result};
use crate::retrieval::{IntentQuery, RetrievalContext};
use crate::store::{MemoryStore, OutcomeLabel};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    #[default]
    MonteCarlo,
    TemporalDifference,
}

/// Scalar feedback for one episode. The value must lie in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSignal {
    pub value: f64,
    pub task_id: String,
    pub episode: u64,
}

impl RewardSignal {
    pub fn new(value: f64, task_id: impl Into<String>, episode: u64) -> Result<Self> {
        check_reward(value)?;
        Ok(Self {
            value,
            task_id: task_id.into(),
            episode,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_reward(self.value)
    }
}

fn check_reward(value: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&value) {
        return Err(MemrlError::invalid(format!("reward {value} not in [-1, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub q_init: f64,
    pub update_mode: UpdateMode,
    /// When false, failed trajectories are not written back.
    pub store_failures: bool,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.9,
            q_init: 0.0,
            update_mode: UpdateMode::MonteCarlo,
            store_failures: true,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(MemrlError::invalid(format!("gamma {} not in [0, 1)", self.gamma)));
        }
        if !self.q_init.is_finite() {
            return Err(MemrlError::invalid("q_init must be finite"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MemrlError::invalid(format!("alpha {alpha} not in (0, 1]")));
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MemrlError::invalid("update inputs must be finite"))
    }
}

/// `q_old + alpha * (reward - q_old)`, unclamped.
pub fn mc_update(q_old: f64, reward: f64, alpha: f64) -> Result<f64> {
    check_finite(&[q_old, reward, alpha])?;
    check_alpha(alpha)?;
    Ok(q_old + alpha * (reward - q_old))
}

/// `q_old + alpha * (reward + gamma * max_next_q - q_old)`, unclamped.
///
/// With `max_next_q == 0` or `gamma == 0` this is bit-identical to
/// [`mc_update`].
pub fn td_update(q_old: f64, reward: f64, gamma: f64, max_next_q: f64, alpha: f64) -> Result<f64> {
    check_finite(&[q_old, reward, gamma, max_next_q, alpha])?;
    check_alpha(alpha)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(MemrlError::invalid(format!("gamma {gamma} not in [0, 1)")));
    }
    Ok(q_old + alpha * (reward + gamma * max_next_q - q_old))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityUpdate {
    pub id: u64,
    pub old_q: f64,
    pub new_q: f64,
}

fn next_q(q_old: f64, reward: f64, cfg: &LearningConfig, max_next_q: f64) -> Result<f64> {
    match cfg.update_mode {
        UpdateMode::MonteCarlo => mc_update(q_old, reward, cfg.alpha),
        UpdateMode::TemporalDifference => td_update(q_old, reward, cfg.gamma, max_next_q, cfg.alpha),
    }
}

/// Applies the same reward to every memory injected by `context`.
///
/// `max_next_q` is only read in temporal-difference mode; pass 0.0 for a
/// terminal step.
pub fn apply_feedback(
    store: &mut MemoryStore,
    context: &RetrievalContext,
    reward: &RewardSignal,
    cfg: &LearningConfig,
    max_next_q: f64,
) -> Result<Vec<UtilityUpdate>> {
    apply_feedback_ids(store, &context.ids(), reward.value, cfg, max_next_q)
}

/// [`apply_feedback`] for an explicit id list. Duplicate ids are rejected.
/// Validation happens before any mutation and the batch is atomic.
pub fn apply_feedback_ids(
    store: &mut MemoryStore,
    ids: &[u64],
    reward: f64,
    cfg: &LearningConfig,
    max_next_q: f64,
) -> Result<Vec<UtilityUpdate>> {
    check_reward(reward)?;
    cfg.validate()?;
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(MemrlError::invalid(format!("duplicate id {id} in feedback")));
        }
    }
    let mut updates = Vec::with_capacity(ids.len());
    for &id in ids {
        let old_q = store.get(id).ok_or(MemrlError::NotFound(id))?.utility;
        let new_q = next_q(old_q, reward, cfg, max_next_q)?;
        updates.push(UtilityUpdate { id, old_q, new_q });
    }
    let batch: Vec<(u64, f64)> = updates.iter().map(|u| (u.id, u.new_q)).collect();
    store.update_utilities(&batch)?;
    Ok(updates)
}

/// Turns a raw trajectory into the experience text that gets stored.
pub trait ExperienceSummarizer {
    fn summarize(&self, trajectory: &str) -> String;
}

/// Stores the trajectory text unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentitySummarizer;

impl ExperienceSummarizer for IdentitySummarizer {
    fn summarize(&self, trajectory: &str) -> String {
        trajectory.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "id")]
pub enum WriteBack {
    Inserted(u64),
    /// A failed trajectory was dropped because `store_failures` is off.
    Skipped,
}

impl WriteBack {
    pub fn id(self) -> Option<u64> {
        match self {
            WriteBack::Inserted(id) => Some(id),
            WriteBack::Skipped => None,
        }
    }
}

/// Writes a finished trajectory back as a new triplet with `cfg.q_init`.
pub fn record_trajectory(
    store: &mut MemoryStore,
    query: &IntentQuery,
    experience_summary: &str,
    outcome_label: OutcomeLabel,
    cfg: &LearningConfig,
) -> Result<WriteBack> {
    record_trajectory_with(store, query, experience_summary, outcome_label, cfg, &IdentitySummarizer)
}

pub fn record_trajectory_with(
    store: &mut MemoryStore,
    query: &IntentQuery,
    trajectory: &str,
    outcome_label: OutcomeLabel,
    cfg: &LearningConfig,
    summarizer: &dyn ExperienceSummarizer,
) -> Result<WriteBack> {
    if trajectory.is_empty() {
        return Err(MemrlError::invalid("experience summary must not be empty"));
    }
    if outcome_label == OutcomeLabel::Failure && !cfg.store_failures {
        return Ok(WriteBack::Skipped);
    }
    let experience = summarizer.summarize(trajectory);
    let id = store.insert_triplet(
        &query.text,
        &query.embedding,
        &experience,
        cfg.q_init,
        outcome_label,
    )?;
    Ok(WriteBack::Inserted(id))
}
