//! Synthetic tasks, memories and reward models.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_deterministic, EmbeddingVector};
use crate::error::{MemrlError, Result};
use crate::retrieval::IntentQuery;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Reward is +1 with probability `(1 + mean) / 2`, else -1.
    #[default]
    Bernoulli,
    /// `clamp(mean + sigma * N(0, 1), -1, 1)`.
    GaussianClipped { sigma: f64 },
}

impl NoiseModel {
    /// Draws `(reward, success)` for a given mean reward.
    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> (f64, bool) {
        match *self {
            NoiseModel::Bernoulli => {
                let success = rng.random::<f64>() < (1.0 + mean) / 2.0;
                (if success { 1.0 } else { -1.0 }, success)
            }
            NoiseModel::GaussianClipped { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                let r = (mean + sigma * z).clamp(-1.0, 1.0);
                (r, r > 0.0)
            }
        }
    }
}

/// One task of the fixed task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: u64,
    pub intent_text: String,
    pub latent_skill: u32,
    pub embedding: EmbeddingVector,
    /// Alternative phrasings; epoch `e` uses `paraphrases[(e - 1) % len]`.
    /// Empty means the task is always phrased as `intent_text`.
    pub paraphrases: Vec<IntentQuery>,
}

impl SyntheticTask {
    pub fn new(task_id: u64, intent_text: &str, latent_skill: u32, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            task_id,
            intent_text: intent_text.to_string(),
            latent_skill,
            embedding: embed_deterministic(intent_text, dim, seed)?,
            paraphrases: Vec::new(),
        })
    }

    pub fn query(&self, epoch: u32) -> IntentQuery {
        if self.paraphrases.is_empty() {
            return IntentQuery::new(self.intent_text.clone(), self.embedding.clone());
        }
        let i = (epoch.max(1) as usize - 1) % self.paraphrases.len();
        self.paraphrases[i].clone()
    }
}

/// A memory present in the bank before the first episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMemory {
    pub intent_text: String,
    pub experience: String,
    pub skill: u32,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardEntry {
    pub task_skill: u32,
    pub memory_skill: u32,
    pub mean: f64,
}

/// Mean reward for each (task skill, memory skill) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RewardTableRepr", into = "RewardTableRepr")]
pub struct RewardTable {
    entries: HashMap<(u32, u32), f64>,
    default_mean: f64,
}

#[derive(Serialize, Deserialize)]
struct RewardTableRepr {
    entries: Vec<RewardEntry>,
    default_mean: f64,
}

impl From<RewardTableRepr> for RewardTable {
    fn from(r: RewardTableRepr) -> Self {
        Self {
            entries: r
                .entries
                .into_iter()
                .map(|e| ((e.task_skill, e.memory_skill), e.mean))
                .collect(),
            default_mean: r.default_mean,
        }
    }
}

impl From<RewardTable> for RewardTableRepr {
    fn from(t: RewardTable) -> Self {
        let mut entries: Vec<RewardEntry> = t
            .entries
            .into_iter()
            .map(|((task_skill, memory_skill), mean)| RewardEntry {
                task_skill,
                memory_skill,
                mean,
            })
            .collect();
        entries.sort_by_key(|e| (e.task_skill, e.memory_skill));
        Self {
            entries,
            default_mean: t.default_mean,
        }
    }
}

impl RewardTable {
    pub fn new(default_mean: f64) -> Result<Self> {
        check_mean(default_mean)?;
        Ok(Self {
            entries: HashMap::new(),
            default_mean,
        })
    }

    pub fn set(&mut self, task_skill: u32, memory_skill: u32, mean: f64) -> Result<()> {
        check_mean(mean)?;
        self.entries.insert((task_skill, memory_skill), mean);
        Ok(())
    }

    pub fn mean(&self, task_skill: u32, memory_skill: u32) -> f64 {
        self.entries
            .get(&(task_skill, memory_skill))
            .copied()
            .unwrap_or(self.default_mean)
    }
}

fn check_mean(mean: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&mean) {
        return Err(MemrlError::invalid(format!("mean reward {mean} not in [-1, 1]")));
    }
    Ok(())
}

/// Skill labels given to written-back memories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WriteBackSkills {
    /// Added to the task skill for a successful trajectory.
    pub success_offset: u32,
    /// Added to the task skill for a failed trajectory.
    pub failure_offset: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvironment {
    pub name: String,
    pub tasks: Vec<SyntheticTask>,
    pub memories: Vec<SeedMemory>,
    pub mean_reward_table: RewardTable,
    pub noise_model: NoiseModel,
    /// Success probability of the frozen policy when nothing is injected.
    pub base_rate: f64,
    /// `None` disables trajectory write-back.
    pub write_back: Option<WriteBackSkills>,
    pub dim: usize,
    pub rng_seed: u64,
}

impl SyntheticEnvironment {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.base_rate) {
            return Err(MemrlError::invalid("base_rate must lie in [0, 1]"));
        }
        if let NoiseModel::GaussianClipped { sigma } = self.noise_model {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(MemrlError::invalid("sigma must be non-negative"));
            }
        }
        for t in &self.tasks {
            if t.embedding.dim() != self.dim || t.paraphrases.iter().any(|p| p.embedding.dim() != self.dim) {
                return Err(MemrlError::InvalidDimension {
                    expected: self.dim,
                    actual: t.embedding.dim(),
                });
            }
        }
        for m in &self.memories {
            if m.embedding.dim() != self.dim {
                return Err(MemrlError::InvalidDimension {
                    expected: self.dim,
                    actual: m.embedding.dim(),
                });
            }
        }
        Ok(())
    }

    /// Mean reward of the no-memory fallback under the noise model.
    pub fn base_mean(&self) -> f64 {
        2.0 * self.base_rate - 1.0
    }

    pub fn task(&self, task_id: u64) -> Option<&SyntheticTask> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// One task, one memory whose skill matches it.
    pub fn single_pair(mean: f64, dim: usize, seed: u64) -> Result<Self> {
        let task = SyntheticTask::new(1, "sort the red blocks", 0, dim, seed)?;
        let memory = SeedMemory {
            intent_text: task.intent_text.clone(),
            experience: "stack by colour first".into(),
            skill: 0,
            embedding: task.embedding.clone(),
        };
        let mut table = RewardTable::new(-1.0)?;
        table.set(0, 0, mean)?;
        Ok(Self {
            name: "single_pair".into(),
            tasks: vec![task],
            memories: vec![memory],
            mean_reward_table: table,
            noise_model: NoiseModel::Bernoulli,
            base_rate: 0.25,
            write_back: None,
            dim,
            rng_seed: seed,
        })
    }
}

/// Parameters of the generated distractor family of environments.
///
/// Every group shares a three-word intent core. Each group owns a task set,
/// a helpful memory, a near-duplicate "twin" memory that is harmful, and a
/// loosely related context memory. Bridge memories are similar to the tasks
/// of two groups at once and help only one of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractorSpec {
    pub name: String,
    pub groups: usize,
    pub tasks_per_group: usize,
    /// Mean reward of each group's helpful memory, cycled over groups.
    pub good_means: Vec<f64>,
    pub twin_mean: f64,
    pub context_mean: f64,
    /// Each bridge links group `i` (helped) to group `i + 1` (harmed).
    pub bridges: usize,
    pub bridge_help_mean: f64,
    pub bridge_harm_mean: f64,
    /// Mean for any pair not listed above.
    pub cross_mean: f64,
    pub noise: NoiseModel,
    pub base_rate: f64,
    /// Phrasings per task; 0 keeps a single fixed phrasing.
    pub paraphrases: usize,
    pub write_back: bool,
    pub success_memory_mean: f64,
    pub failure_memory_mean: f64,
    /// Weight of a coordinate shared by every embedding. With `a > 0` the
    /// cosine between any two intents becomes `(cos + a) / (1 + a)`, which
    /// mimics the narrow similarity band of dense text embedders.
    pub anisotropy: f64,
    pub dim: usize,
    pub embed_seed: u64,
    pub text_seed: u64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            name: "distractor".into(),
            groups: 12,
            tasks_per_group: 4,
            good_means: vec![0.8],
            twin_mean: -0.8,
            context_mean: -0.2,
            bridges: 0,
            bridge_help_mean: 0.9,
            bridge_harm_mean: -0.8,
            cross_mean: -0.5,
            noise: NoiseModel::Bernoulli,
            base_rate: 0.25,
            paraphrases: 0,
            write_back: false,
            success_memory_mean: 0.6,
            failure_memory_mean: -0.4,
            anisotropy: 0.0,
            dim: 256,
            embed_seed: 7,
            text_seed: 1,
        }
    }
}

/// Skill-label layout used by [`DistractorSpec::build`]. Task skills are the
/// group index `g`; memories use offsets of `g` so the table stays readable.
pub mod skills {
    pub const TWIN: u32 = 1_000;
    pub const CONTEXT: u32 = 2_000;
    pub const BRIDGE: u32 = 3_000;
    pub const SUCCESS_WRITE: u32 = 4_000;
    pub const FAILURE_WRITE: u32 = 5_000;
}

fn random_word<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

impl DistractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.tasks_per_group == 0 {
            return Err(MemrlError::invalid("groups and tasks_per_group must be positive"));
        }
        if self.good_means.is_empty() {
            return Err(MemrlError::invalid("good_means must not be empty"));
        }
        if !(self.anisotropy.is_finite() && self.anisotropy >= 0.0) {
            return Err(MemrlError::invalid("anisotropy must be finite and non-negative"));
        }
        if self.anisotropy > 0.0 && self.dim < 2 {
            return Err(MemrlError::invalid("anisotropy needs dim >= 2"));
        }
        if self.bridges >= self.groups.max(1) && self.bridges > 0 {
            return Err(MemrlError::invalid("bridges must be fewer than groups"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<SyntheticEnvironment> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.text_seed);
        let embed = |text: &str| -> Result<EmbeddingVector> {
            if self.anisotropy == 0.0 {
                return embed_deterministic(text, self.dim, self.embed_seed);
            }
            let scale = (1.0 + self.anisotropy).sqrt().recip();
            let mut v: Vec<f64> = embed_deterministic(text, self.dim - 1, self.embed_seed)?
                .values()
                .iter()
                .map(|x| x * scale)
                .collect();
            v.push(self.anisotropy.sqrt() * scale);
            EmbeddingVector::normalize(v)
        };
        let cores: Vec<[String; 3]> = (0..self.groups)
            .map(|_| {
                [
                    random_word(&mut rng, 6),
                    random_word(&mut rng, 6),
                    random_word(&mut rng, 4),
                ]
            })
            .collect();

        let mut table = RewardTable::new(self.cross_mean)?;
        let mut tasks = Vec::new();
        let mut memories = Vec::new();
        let mut next_task = 1u64;
        for (g, core) in cores.iter().enumerate() {
            let skill = g as u32;
            let core_text = core.join(" ");
            for _ in 0..self.tasks_per_group {
                let tag = random_word(&mut rng, 4);
                let text = format!("{core_text} {tag}");
                let mut task = SyntheticTask {
                    task_id: next_task,
                    embedding: embed(&text)?,
                    intent_text: text.clone(),
                    latent_skill: skill,
                    paraphrases: Vec::new(),
                };
                for _ in 0..self.paraphrases {
                    let p = format!("{text} {}", random_word(&mut rng, 4));
                    task.paraphrases.push(IntentQuery::new(p.clone(), embed(&p)?));
                }
                tasks.push(task);
                next_task += 1;
            }
            let good = format!("{core_text} {}", random_word(&mut rng, 4));
            let twin = format!("{core_text} {}", random_word(&mut rng, 4));
            let context = format!("{} {} {}", core[0], core[1], random_word(&mut rng, 6));
            for (text, skill_label, note) in [
                (good, skill, "worked"),
                (twin, skills::TWIN + skill, "looked right, failed"),
                (context, skills::CONTEXT + skill, "related notes"),
            ] {
                memories.push(SeedMemory {
                    embedding: embed(&text)?,
                    experience: format!("{note}: {text}"),
                    intent_text: text,
                    skill: skill_label,
                });
            }
            let good_mean = self.good_means[g % self.good_means.len()];
            table.set(skill, skill, good_mean)?;
            table.set(skill, skills::TWIN + skill, self.twin_mean)?;
            table.set(skill, skills::CONTEXT + skill, self.context_mean)?;
            table.set(skill, skills::SUCCESS_WRITE + skill, self.success_memory_mean)?;
            table.set(skill, skills::FAILURE_WRITE + skill, self.failure_memory_mean)?;
        }
        for b in 0..self.bridges {
            let (helped, harmed) = (b, b + 1);
            let text = format!(
                "{} {} {} {}",
                cores[helped][0], cores[helped][1], cores[harmed][0], cores[harmed][1]
            );
            let skill = skills::BRIDGE + b as u32;
            memories.push(SeedMemory {
                embedding: embed(&text)?,
                experience: format!("shared shortcut: {text}"),
                intent_text: text,
                skill,
            });
            table.set(helped as u32, skill, self.bridge_help_mean)?;
            table.set(harmed as u32, skill, self.bridge_harm_mean)?;
        }
        let env = SyntheticEnvironment {
            name: self.name.clone(),
            tasks,
            memories,
            mean_reward_table: table,
            noise_model: self.noise,
            base_rate: self.base_rate,
            write_back: self.write_back.then_some(WriteBackSkills {
                success_offset: skills::SUCCESS_WRITE,
                failure_offset: skills::FAILURE_WRITE,
            }),
            dim: self.dim,
            rng_seed: self.text_seed,
        };
        env.validate()?;
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_frequency_tracks_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let total: f64 = (0..n).map(|_| NoiseModel::Bernoulli.sample(0.5, &mut rng).0).sum();
        assert!((total / n as f64 - 0.5).abs() < 0.03);
    }

    #[test]
    fn gaussian_rewards_are_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = NoiseModel::GaussianClipped { sigma: 3.0 };
        for _ in 0..1000 {
            let (r, ok) = noise.sample(0.9, &mut rng);
            assert!((-1.0..=1.0).contains(&r));
            assert_eq!(ok, r > 0.0);
        }
    }

    #[test]
    fn reward_table_defaults_and_rejects_out_of_range() {
        let mut t = RewardTable::new(-0.5).unwrap();
        t.set(1, 2, 0.3).unwrap();
        assert_eq!(t.mean(1, 2), 0.3);
        assert_eq!(t.mean(2, 1), -0.5);
        assert!(t.set(0, 0, 1.2).is_err());
        let json = serde_json::to_string(&t).unwrap();
        let back: RewardTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn distractor_build_is_deterministic_and_gated() {
        let spec = DistractorSpec {
            bridges: 2,
            ..DistractorSpec::default()
        };
        let a = spec.build().unwrap();
        let b = spec.build().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tasks.len(), 48);
        assert_eq!(a.memories.len(), 12 * 3 + 2);
        // different groups never share a memory above the default threshold,
        // bridges aside
        for task in &a.tasks {
            for m in a.memories.iter().filter(|m| m.skill < skills::BRIDGE) {
                let group = m.skill % 1_000;
                let sim = crate::embedding::cosine_similarity(&task.embedding, &m.embedding).unwrap();
                if group != task.latent_skill {
                    assert!(sim < 0.3, "cross-group similarity {sim}");
                }
            }
        }
    }

    #[test]
    fn anisotropy_maps_cosine_affinely() {
        let flat = DistractorSpec {
            groups: 2,
            dim: 63,
            ..DistractorSpec::default()
        };
        let tilted = DistractorSpec {
            anisotropy: 1.5,
            dim: 64,
            ..flat.clone()
        };
        let (f, t) = (flat.build().unwrap(), tilted.build().unwrap());
        for (tf, tt) in f.tasks.iter().zip(&t.tasks) {
            for (mf, mt) in f.memories.iter().zip(&t.memories) {
                let c = crate::embedding::cosine_similarity(&tf.embedding, &mf.embedding).unwrap();
                let c2 = crate::embedding::cosine_similarity(&tt.embedding, &mt.embedding).unwrap();
                assert!((c2 - (c + 1.5) / 2.5).abs() < 1e-12);
            }
        }
        assert!(DistractorSpec { anisotropy: -1.0, ..flat }.validate().is_err());
    }

    #[test]
    fn paraphrases_cycle_by_epoch() {
        let spec = DistractorSpec {
            groups: 1,
            tasks_per_group: 1,
            paraphrases: 2,
            ..DistractorSpec::default()
        };
        let env = spec.build().unwrap();
        let t = &env.tasks[0];
        assert_eq!(t.query(1), t.query(3));
        assert_ne!(t.query(1).text, t.query(2).text);
    }
}
