//! The retrieve → infer → reward → update → write-back loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{SyntheticEnvironment, SyntheticTask};
use crate::config::EngineConfig;
use crate::error::{MemrlError, Result};
use crate::learning::{apply_feedback, record_trajectory, RewardSignal, UtilityUpdate, UpdateMode};
use crate::retrieval::{retrieve_with_policy, ScoredCandidate};
use crate::store::{MemoryStore, OutcomeLabel};

/// A memory store plus the latent skill of every memory in it.
#[derive(Debug)]
pub struct SimBank {
    pub store: MemoryStore,
    skills: HashMap<u64, u32>,
}

impl SimBank {
    /// An in-memory bank holding the environment's seed memories at `q_init`.
    pub fn seeded(env: &SyntheticEnvironment, q_init: f64) -> Result<Self> {
        let mut bank = Self {
            store: MemoryStore::in_memory(env.dim),
            skills: HashMap::new(),
        };
        for m in &env.memories {
            let id = bank.store.insert_triplet(
                &m.intent_text,
                &m.embedding,
                &m.experience,
                q_init,
                OutcomeLabel::Unlabeled,
            )?;
            bank.skills.insert(id, m.skill);
        }
        Ok(bank)
    }

    pub fn skill(&self, id: u64) -> Option<u32> {
        self.skills.get(&id).copied()
    }
}

/// Audit record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub epoch: u32,
    pub task_id: u64,
    pub selected: Vec<ScoredCandidate>,
    /// The best-ranked injected memory, which decides the success odds.
    pub top_id: Option<u64>,
    pub mean_reward: f64,
    pub reward: f64,
    pub success: bool,
    pub updates: Vec<UtilityUpdate>,
    pub written: Option<u64>,
}

/// Runs one episode. In temporal-difference mode `next_task` supplies the
/// bootstrap value: the raw utility of the top memory Phase B would select
/// for it (0 when absent or empty).
pub fn run_episode(
    env: &SyntheticEnvironment,
    bank: &mut SimBank,
    task: &SyntheticTask,
    config: &EngineConfig,
    epoch: u32,
    next_task: Option<&SyntheticTask>,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeLog> {
    let params = config.retrieval_params();
    let query = task.query(epoch);
    let context = retrieve_with_policy(
        bank.store.bank(),
        &query,
        params,
        config.policy,
        config.temperature,
        rng,
    )?;
    let top_id = context.top().map(|c| c.triplet_id);
    let mean_reward = match top_id {
        Some(id) => {
            let skill = bank
                .skill(id)
                .ok_or_else(|| MemrlError::invalid(format!("memory {id} has no skill label")))?;
            env.mean_reward_table.mean(task.latent_skill, skill)
        }
        None => env.base_mean(),
    };
    let (reward, success) = env.noise_model.sample(mean_reward, rng);

    let learning = config.learning();
    let max_next_q = match (learning.update_mode, next_task) {
        (UpdateMode::TemporalDifference, Some(next)) => {
            let next_ctx = crate::retrieval::retrieve(bank.store.bank(), &next.query(epoch), params)?;
            next_ctx.top().map_or(0.0, |c| c.raw_q)
        }
        _ => 0.0,
    };
    let signal = RewardSignal::new(reward, task.task_id.to_string(), u64::from(epoch))?;
    let updates = apply_feedback(&mut bank.store, &context, &signal, &learning, max_next_q)?;

    let mut written = None;
    if let Some(wb) = env.write_back {
        let label = if success {
            OutcomeLabel::Success
        } else {
            OutcomeLabel::Failure
        };
        let summary = format!(
            "epoch {epoch} task {} {} with memory {}",
            task.task_id,
            if success { "solved" } else { "failed" },
            top_id.map_or_else(|| "none".to_string(), |id| id.to_string())
        );
        if let Some(id) = record_trajectory(&mut bank.store, &query, &summary, label, &learning)?.id() {
            let offset = if success {
                wb.success_offset
            } else {
                wb.failure_offset
            };
            bank.skills.insert(id, offset + task.latent_skill);
            written = Some(id);
        }
    }

    Ok(EpisodeLog {
        epoch,
        task_id: task.task_id,
        selected: context.selected,
        top_id,
        mean_reward,
        reward,
        success,
        updates,
        written,
    })
}

/// [`run_episode`] with its own generator seeded from `seed`.
pub fn run_episode_seeded(
    env: &SyntheticEnvironment,
    bank: &mut SimBank,
    task: &SyntheticTask,
    config: &EngineConfig,
    seed: u64,
) -> Result<EpisodeLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_episode(env, bank, task, config, 1, None, &mut rng)
}

/// Runs one epoch: every task once, in an order shuffled with `rng`.
pub fn run_epoch(
    env: &SyntheticEnvironment,
    bank: &mut SimBank,
    config: &EngineConfig,
    epoch: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeLog>> {
    let mut order: Vec<usize> = (0..env.tasks.len()).collect();
    order.shuffle(rng);
    let mut logs = Vec::with_capacity(order.len());
    for (pos, &i) in order.iter().enumerate() {
        let next = order.get(pos + 1).map(|&j| &env.tasks[j]);
        logs.push(run_episode(env, bank, &env.tasks[i], config, epoch, next, rng)?);
    }
    Ok(logs)
}

/// Runs `epochs` epochs numbered from 1.
pub fn run_epochs(
    env: &SyntheticEnvironment,
    bank: &mut SimBank,
    config: &EngineConfig,
    epochs: u32,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::with_capacity(epochs as usize * env.tasks.len());
    for epoch in 1..=epochs {
        logs.extend(run_epoch(env, bank, config, epoch, &mut rng)?);
    }
    Ok(logs)
}

/// A seeded bank plus the logs of `epochs` epochs.
#[derive(Debug)]
pub struct SimRun {
    pub bank: SimBank,
    pub logs: Vec<EpisodeLog>,
}

pub fn simulate(
    env: &SyntheticEnvironment,
    config: &EngineConfig,
    epochs: u32,
    seed: u64,
) -> Result<SimRun> {
    let mut bank = SimBank::seeded(env, config.q_init)?;
    let logs = run_epochs(env, &mut bank, config, epochs, seed)?;
    Ok(SimRun { bank, logs })
}
