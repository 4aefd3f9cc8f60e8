//! Theory checks and ablations built on the synthetic harness.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::env::{DistractorSpec, SyntheticEnvironment};
use super::episode::{run_epoch, EpisodeLog, SimBank};
use crate::config::{hash_json, EngineConfig};
use crate::error::{MemrlError, Result};
use crate::metrics::{
    cumulative_success_rate, epoch_accuracy, forgetting_rate, mean_forgetting_rate,
    q_bin_composition, q_success_correlation, Check, ExperimentReport, MetricSeries,
};
use crate::retrieval::{
    boltzmann_distribution, phase_a_recall, phase_a_recall_ungated, similarity_prior,
    IntentQuery, RetrievalParams,
};
use crate::store::MemoryBank;

/// Seed of the `i`-th independent run derived from a base seed.
pub fn run_seed(base: u64, i: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MemrlError::invalid(format!("alpha {alpha} not in (0, 1]")));
    }
    Ok(())
}

/// Expected utility after `t` updates from `q0` toward mean reward `beta`.
pub fn theoretical_mean(alpha: f64, beta: f64, q0: f64, t: u32) -> f64 {
    beta - (1.0 - alpha).powi(t as i32) * (beta - q0)
}

/// Variance of the utility after `t` updates, starting from variance `v0`.
pub fn theoretical_variance(alpha: f64, sigma2: f64, v0: f64, t: u32) -> f64 {
    let r = (1.0 - alpha) * (1.0 - alpha);
    let mut sum = 0.0;
    let mut term = 1.0;
    for _ in 0..t {
        sum += term;
        term *= r;
    }
    r.powi(t as i32) * v0 + alpha * alpha * sigma2 * sum
}

/// Asymptotic variance `alpha / (2 - alpha) * sigma2`.
pub fn variance_bound(alpha: f64, sigma2: f64) -> f64 {
    alpha / (2.0 - alpha) * sigma2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub t: u32,
    pub empirical_mean: f64,
    pub theoretical: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub alpha: f64,
    pub beta: f64,
    pub q0: f64,
    pub n_seeds: usize,
    /// Reward standard deviation, `sqrt(beta * (1 - beta))`.
    pub sigma: f64,
    /// `4 * sigma / sqrt(n_seeds)`.
    pub tolerance: f64,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceResult {
    pub fn max_gap(&self) -> f64 {
        self.rows.iter().map(|r| r.gap).fold(0.0, f64::max)
    }

    pub fn within_tolerance(&self) -> bool {
        self.rows.iter().all(|r| r.gap <= self.tolerance)
    }
}

/// Mean utility of one (intent, memory) pair across `n_seeds` independent
/// runs with rewards drawn from Bernoulli(`beta`) on {0, 1}. Row `t = 0` is
/// the initial value.
pub fn experiment_convergence(
    alpha: f64,
    beta: f64,
    q0: f64,
    steps: u32,
    n_seeds: usize,
    seed: u64,
) -> Result<ConvergenceResult> {
    check_alpha(alpha)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(MemrlError::invalid("beta must lie in [0, 1] for {0, 1} rewards"));
    }
    if n_seeds == 0 {
        return Err(MemrlError::invalid("n_seeds must be positive"));
    }
    let mut sums = vec![0.0; steps as usize + 1];
    for i in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(seed, i as u64));
        let mut q = q0;
        sums[0] += q;
        for slot in sums.iter_mut().skip(1) {
            let r = if rng.random::<f64>() < beta { 1.0 } else { 0.0 };
            q += alpha * (r - q);
            *slot += q;
        }
    }
    let n = n_seeds as f64;
    let sigma = (beta * (1.0 - beta)).sqrt();
    let rows = sums
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let empirical_mean = s / n;
            let theoretical = theoretical_mean(alpha, beta, q0, t as u32);
            ConvergenceRow {
                t: t as u32,
                empirical_mean,
                theoretical,
                gap: (empirical_mean - theoretical).abs(),
            }
        })
        .collect();
    Ok(ConvergenceResult {
        alpha,
        beta,
        q0,
        n_seeds,
        sigma,
        tolerance: 4.0 * sigma / n.sqrt(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub t: u32,
    pub empirical: f64,
    pub formula: f64,
    pub bootstrap_se: f64,
    /// `|empirical - formula| / bootstrap_se`.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceResult {
    pub alpha: f64,
    pub sigma2: f64,
    pub bound: f64,
    pub steps: u32,
    /// Sample variance across seeds at `t = steps`.
    pub steady_variance: f64,
    pub steady_ratio: f64,
    pub curve: Vec<VarianceRow>,
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Spread of the utility across `n_seeds` runs with Bernoulli rewards on
/// {0, 1} whose variance is `reward_variance` (at most 0.25). Starts at
/// `q0 = 0`, so `v0 = 0`.
pub fn experiment_variance(
    alpha: f64,
    reward_variance: f64,
    steps: u32,
    n_seeds: usize,
    checkpoints: &[u32],
    bootstrap: usize,
    seed: u64,
) -> Result<VarianceResult> {
    check_alpha(alpha)?;
    if !(0.0..=0.25).contains(&reward_variance) {
        return Err(MemrlError::invalid("reward_variance must lie in [0, 0.25]"));
    }
    if n_seeds < 2 || bootstrap < 2 {
        return Err(MemrlError::invalid("need at least two seeds and two bootstrap draws"));
    }
    if let Some(&t) = checkpoints.iter().find(|&&t| t == 0 || t > steps) {
        return Err(MemrlError::invalid(format!("checkpoint {t} outside 1..={steps}")));
    }
    let p = 0.5 + (0.25 - reward_variance).sqrt();
    let mut tracked: Vec<u32> = checkpoints.to_vec();
    tracked.push(steps);
    let mut samples = vec![Vec::with_capacity(n_seeds); tracked.len()];
    for i in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(seed, i as u64));
        let mut q = 0.0;
        for t in 1..=steps {
            let r = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            q += alpha * (r - q);
            for (k, &c) in tracked.iter().enumerate() {
                if c == t {
                    samples[k].push(q);
                }
            }
        }
    }
    let mut boot_rng = ChaCha8Rng::seed_from_u64(run_seed(seed, u64::MAX));
    let mut resample = vec![0.0; n_seeds];
    let curve = checkpoints
        .iter()
        .zip(&samples)
        .map(|(&t, xs)| {
            let empirical = sample_variance(xs);
            let mut boots = Vec::with_capacity(bootstrap);
            for _ in 0..bootstrap {
                for slot in resample.iter_mut() {
                    *slot = xs[boot_rng.random_range(0..n_seeds)];
                }
                boots.push(sample_variance(&resample));
            }
            let bootstrap_se = sample_variance(&boots).sqrt();
            let formula = theoretical_variance(alpha, reward_variance, 0.0, t);
            let diff = (empirical - formula).abs();
            VarianceRow {
                t,
                empirical,
                formula,
                bootstrap_se,
                z: if bootstrap_se > 0.0 {
                    diff / bootstrap_se
                } else if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                },
            }
        })
        .collect();
    let bound = variance_bound(alpha, reward_variance);
    let steady_variance = sample_variance(samples.last().expect("steps tracked"));
    Ok(VarianceResult {
        alpha,
        sigma2: reward_variance,
        bound,
        steps,
        steady_variance,
        steady_ratio: if bound > 0.0 { steady_variance / bound } else { 0.0 },
        curve,
    })
}

/// Accuracy of pure similarity retrieval on a fixed bank of seed memories:
/// the mean success probability of each task's most similar memory.
/// Only meaningful when write-back is off and rewards are Bernoulli.
pub fn similarity_only_accuracy(env: &SyntheticEnvironment, params: RetrievalParams) -> Result<f64> {
    let bank = SimBank::seeded(env, 0.0)?;
    let mut total = 0.0;
    for task in &env.tasks {
        let pool = recall(bank.store.bank(), &task.query(1), params)?;
        let mean = match pool.entries.first() {
            Some(top) => env
                .mean_reward_table
                .mean(task.latent_skill, bank.skill(top.triplet_id).unwrap_or(u32::MAX)),
            None => env.base_mean(),
        };
        total += (1.0 + mean) / 2.0;
    }
    Ok(total / env.tasks.len() as f64)
}

fn recall(
    bank: &MemoryBank,
    query: &IntentQuery,
    params: RetrievalParams,
) -> Result<crate::retrieval::CandidatePool> {
    if params.sim_gate {
        phase_a_recall(bank, query, params.delta, params.k1)
    } else {
        phase_a_recall_ungated(bank, query, params.k1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub j: f64,
    pub expected_utility: f64,
    pub kl: f64,
    pub empty_pools: usize,
}

/// Sample mean over `queries` of
/// `sum_m mu(m|s) Q(m) - KL(mu || pi_sim) / temperature`,
/// with `mu` the Boltzmann policy over the Phase-A pool and `pi_sim` the
/// similarity softmax. Empty pools contribute zero.
pub fn compute_variational_objective(
    bank: &MemoryBank,
    queries: &[IntentQuery],
    params: RetrievalParams,
    temperature: f64,
) -> Result<ObjectiveEstimate> {
    if queries.is_empty() {
        return Err(MemrlError::invalid("need at least one query"));
    }
    let mut eu = 0.0;
    let mut kl = 0.0;
    let mut empty_pools = 0;
    for q in queries {
        let pool = recall(bank, q, params)?;
        if pool.is_empty() {
            empty_pools += 1;
            continue;
        }
        let mu = boltzmann_distribution(&pool, temperature)?;
        let prior = similarity_prior(&pool);
        for ((e, m), p) in pool.entries.iter().zip(&mu).zip(&prior) {
            eu += m * e.raw_q;
            if *m > 0.0 {
                kl += m * (m / p).ln();
            }
        }
    }
    let n = queries.len() as f64;
    let (eu, kl) = (eu / n, kl / n);
    Ok(ObjectiveEstimate {
        j: eu - kl / temperature,
        expected_utility: eu,
        kl,
        empty_pools,
    })
}

/// Per-epoch accuracy and cumulative success rate of one run.
fn curves(logs: &[EpisodeLog], epochs: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut acc = Vec::with_capacity(epochs as usize);
    let mut csr = Vec::with_capacity(epochs as usize);
    for e in 1..=epochs {
        acc.push(epoch_accuracy(logs, e)?);
        csr.push(cumulative_success_rate(logs, e)?);
    }
    Ok((acc, csr))
}

fn mean_curve(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs `epochs` epochs on a fresh seeded bank, calling `after_epoch` after
/// each one.
fn run_with<F>(
    env: &SyntheticEnvironment,
    config: &EngineConfig,
    epochs: u32,
    seed: u64,
    mut after_epoch: F,
) -> Result<(SimBank, Vec<EpisodeLog>)>
where
    F: FnMut(u32, &SimBank, &[EpisodeLog]) -> Result<()>,
{
    let mut bank = SimBank::seeded(env, config.q_init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::new();
    for epoch in 1..=epochs {
        logs.extend(run_epoch(env, &mut bank, config, epoch, &mut rng)?);
        after_epoch(epoch, &bank, &logs)?;
    }
    Ok((bank, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCurve {
    pub lambda: f64,
    /// Mean over seeds, one value per epoch.
    pub accuracy: Vec<f64>,
    pub csr: Vec<f64>,
    pub final_accuracy: Vec<f64>,
    pub final_csr: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub mean_final_csr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaAblation {
    pub curves: Vec<LambdaCurve>,
    /// Expected accuracy of similarity-only retrieval on the seed bank.
    pub similarity_plateau: f64,
}

impl LambdaAblation {
    pub fn curve(&self, lambda: f64) -> Option<&LambdaCurve> {
        self.curves.iter().find(|c| c.lambda == lambda)
    }
}

pub fn experiment_lambda_ablation(
    env: &SyntheticEnvironment,
    base: &EngineConfig,
    lambdas: &[f64],
    epochs: u32,
    seeds: &[u64],
) -> Result<LambdaAblation> {
    if epochs == 0 || seeds.is_empty() {
        return Err(MemrlError::invalid("need at least one epoch and one seed"));
    }
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let config = EngineConfig {
            lambda,
            ..base.clone()
        };
        config.validate()?;
        let mut accs = Vec::new();
        let mut csrs = Vec::new();
        for &seed in seeds {
            let (_, logs) = run_with(env, &config, epochs, seed, |_, _, _| Ok(()))?;
            let (a, c) = curves(&logs, epochs)?;
            accs.push(a);
            csrs.push(c);
        }
        let final_accuracy: Vec<f64> = accs.iter().map(|a| a[a.len() - 1]).collect();
        let final_csr: Vec<f64> = csrs.iter().map(|c| c[c.len() - 1]).collect();
        out.push(LambdaCurve {
            lambda,
            accuracy: mean_curve(&accs),
            csr: mean_curve(&csrs),
            mean_final_accuracy: mean(&final_accuracy),
            mean_final_csr: mean(&final_csr),
            final_accuracy,
            final_csr,
        });
    }
    let plateau_params = RetrievalParams {
        lambda: 0.0,
        ..base.retrieval_params()
    };
    Ok(LambdaAblation {
        curves: out,
        similarity_plateau: similarity_only_accuracy(env, plateau_params)?,
    })
}

/// Fraction of tasks whose top-selected memory differs from the previous
/// epoch, for epochs `2..`.
pub fn policy_churn(logs: &[EpisodeLog], epochs: u32) -> Vec<f64> {
    let mut tops: BTreeMap<(u32, u64), Option<u64>> = BTreeMap::new();
    for l in logs {
        tops.insert((l.epoch, l.task_id), l.top_id);
    }
    (2..=epochs)
        .map(|e| {
            let mut n = 0usize;
            let mut changed = 0usize;
            for (&(epoch, task), top) in tops.range((e, 0)..=(e, u64::MAX)) {
                debug_assert_eq!(epoch, e);
                if let Some(prev) = tops.get(&(e - 1, task)) {
                    n += 1;
                    if prev != top {
                        changed += 1;
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                changed as f64 / n as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueCheck {
    pub id: u64,
    pub selections: usize,
    pub q: f64,
    pub mean_reward: f64,
    pub reward_sd: f64,
    /// `reward_sd * sqrt(alpha / (2 - alpha) + 1 / selections)`.
    pub standard_error: f64,
    pub within: bool,
}

/// Compares each memory's utility with the mean reward it received as the
/// top-selected memory, for memories selected at least `min_selections`
/// times. The standard error combines the stationary spread of the utility
/// estimate, `alpha / (2 - alpha)` times the reward variance, with the
/// sampling error of the mean.
pub fn value_checks(
    bank: &MemoryBank,
    logs: &[EpisodeLog],
    alpha: f64,
    min_selections: usize,
    tolerance_se: f64,
) -> Vec<ValueCheck> {
    let mut rewards: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for l in logs {
        if let Some(id) = l.top_id {
            rewards.entry(id).or_default().push(l.reward);
        }
    }
    rewards
        .into_iter()
        .filter(|(_, rs)| rs.len() >= min_selections.max(2))
        .filter_map(|(id, rs)| {
            let t = bank.get(id)?;
            let n = rs.len() as f64;
            let m = rs.iter().sum::<f64>() / n;
            let sd = sample_variance(&rs).sqrt();
            let se = sd * (alpha / (2.0 - alpha) + 1.0 / n).sqrt();
            Some(ValueCheck {
                id,
                selections: rs.len(),
                q: t.utility,
                mean_reward: m,
                reward_sd: sd,
                standard_error: se,
                within: (t.utility - m).abs() <= tolerance_se * se,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseRetrieval {
    pub memory_id: u64,
    pub selections: usize,
    /// Empirical `Pr(task | memory)` over the run, by task id.
    pub tasks: BTreeMap<u64, f64>,
}

pub fn inverse_retrieval(logs: &[EpisodeLog]) -> Vec<InverseRetrieval> {
    let mut counts: BTreeMap<u64, BTreeMap<u64, usize>> = BTreeMap::new();
    for l in logs {
        if let Some(id) = l.top_id {
            *counts.entry(id).or_default().entry(l.task_id).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(memory_id, per_task)| {
            let total: usize = per_task.values().sum();
            InverseRetrieval {
                memory_id,
                selections: total,
                tasks: per_task
                    .into_iter()
                    .map(|(t, c)| (t, c as f64 / total as f64))
                    .collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemSeedResult {
    pub seed: u64,
    /// Churn for epochs `2..=epochs`.
    pub churn: Vec<f64>,
    pub objective: Vec<f64>,
    pub value_checks: Vec<ValueCheck>,
    pub q_success_r: f64,
    pub correlation_points: usize,
    pub final_accuracy: f64,
    pub inverse_retrieval: Vec<InverseRetrieval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemStationarity {
    pub epochs: u32,
    pub seeds: Vec<GemSeedResult>,
    /// Mean over seeds, epochs `2..=epochs`.
    pub mean_churn: Vec<f64>,
    pub mean_objective: Vec<f64>,
}

impl GemStationarity {
    pub fn final_churn(&self) -> f64 {
        self.mean_churn.last().copied().unwrap_or(0.0)
    }

    pub fn max_final_churn(&self) -> f64 {
        self.seeds
            .iter()
            .filter_map(|s| s.churn.last().copied())
            .fold(0.0, f64::max)
    }

    pub fn value_checks(&self) -> impl Iterator<Item = &ValueCheck> {
        self.seeds.iter().flat_map(|s| s.value_checks.iter())
    }

    /// Whether the window-averaged churn never rises after `burn_in` epochs.
    pub fn smoothed_churn_non_increasing(&self, burn_in: usize, window: usize) -> bool {
        let c = &self.mean_churn;
        if c.len() <= burn_in + window {
            return true;
        }
        let smoothed: Vec<f64> = c[burn_in..]
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        smoothed.windows(2).all(|p| p[1] <= p[0] + 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemOptions {
    pub min_selections: usize,
    pub tolerance_se: f64,
    pub correlation_min_selections: usize,
}

impl Default for GemOptions {
    fn default() -> Self {
        Self {
            min_selections: 100,
            tolerance_se: 3.0,
            correlation_min_selections: crate::metrics::MIN_SELECTIONS,
        }
    }
}

pub fn experiment_gem_stationarity(
    env: &SyntheticEnvironment,
    config: &EngineConfig,
    epochs: u32,
    seeds: &[u64],
    options: GemOptions,
) -> Result<GemStationarity> {
    if epochs == 0 || seeds.is_empty() {
        return Err(MemrlError::invalid("need at least one epoch and one seed"));
    }
    config.validate()?;
    let queries: Vec<IntentQuery> = env.tasks.iter().map(|t| t.query(1)).collect();
    let params = config.retrieval_params();
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut objective = Vec::with_capacity(epochs as usize);
        let (bank, logs) = run_with(env, config, epochs, seed, |_, bank, _| {
            let est = compute_variational_objective(
                bank.store.bank(),
                &queries,
                params,
                config.temperature,
            )?;
            objective.push(est.j);
            Ok(())
        })?;
        let corr = q_success_correlation(bank.store.bank(), &logs, options.correlation_min_selections);
        results.push(GemSeedResult {
            seed,
            churn: policy_churn(&logs, epochs),
            objective,
            value_checks: value_checks(
                bank.store.bank(),
                &logs,
                config.alpha,
                options.min_selections,
                options.tolerance_se,
            ),
            q_success_r: corr.r,
            correlation_points: corr.points.len(),
            final_accuracy: epoch_accuracy(&logs, epochs)?,
            inverse_retrieval: inverse_retrieval(&logs),
        });
    }
    let churns: Vec<Vec<f64>> = results.iter().map(|r| r.churn.clone()).collect();
    let objectives: Vec<Vec<f64>> = results.iter().map(|r| r.objective.clone()).collect();
    Ok(GemStationarity {
        epochs,
        mean_churn: mean_curve(&churns),
        mean_objective: mean_curve(&objectives),
        seeds: results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub engine: EngineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifelongCurve {
    pub name: String,
    /// Mean forgetting rate over epochs `2..`, one value per seed.
    pub forgetting: Vec<f64>,
    pub mean_forgetting: f64,
    /// Mean over seeds, epochs `2..`.
    pub forgetting_curve: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub csr: Vec<f64>,
    /// Mean over seeds of final-epoch `csr - accuracy`.
    pub final_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lifelong {
    pub variants: Vec<LifelongCurve>,
}

impl Lifelong {
    pub fn variant(&self, name: &str) -> Option<&LifelongCurve> {
        self.variants.iter().find(|v| v.name == name)
    }
}

pub fn experiment_lifelong(
    env: &SyntheticEnvironment,
    variants: &[Variant],
    epochs: u32,
    seeds: &[u64],
) -> Result<Lifelong> {
    if epochs < 2 || seeds.is_empty() {
        return Err(MemrlError::invalid("need at least two epochs and one seed"));
    }
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        v.engine.validate()?;
        let mut forgetting = Vec::new();
        let mut fcurves = Vec::new();
        let mut accs = Vec::new();
        let mut csrs = Vec::new();
        for &seed in seeds {
            let (_, logs) = run_with(env, &v.engine, epochs, seed, |_, _, _| Ok(()))?;
            forgetting.push(mean_forgetting_rate(&logs, epochs)?);
            fcurves.push(
                (2..=epochs)
                    .map(|e| forgetting_rate(&logs, e))
                    .collect::<Result<Vec<_>>>()?,
            );
            let (a, c) = curves(&logs, epochs)?;
            accs.push(a);
            csrs.push(c);
        }
        let gaps: Vec<f64> = accs
            .iter()
            .zip(&csrs)
            .map(|(a, c)| c[c.len() - 1] - a[a.len() - 1])
            .collect();
        out.push(LifelongCurve {
            name: v.name.clone(),
            mean_forgetting: mean(&forgetting),
            forgetting,
            forgetting_curve: mean_curve(&fcurves),
            accuracy: mean_curve(&accs),
            csr: mean_curve(&csrs),
            final_gap: mean(&gaps),
        });
    }
    Ok(Lifelong { variants: out })
}

fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

/// An experiment definition as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentConfig {
    Convergence {
        alphas: Vec<f64>,
        beta: f64,
        #[serde(default)]
        q0: f64,
        steps: u32,
        n_seeds: usize,
        #[serde(default)]
        seed: u64,
    },
    Variance {
        alphas: Vec<f64>,
        reward_variance: f64,
        steps: u32,
        n_seeds: usize,
        checkpoints: Vec<u32>,
        #[serde(default = "default_bootstrap")]
        bootstrap: usize,
        #[serde(default = "default_bound_slack")]
        bound_slack: f64,
        #[serde(default = "default_three")]
        max_z: f64,
        #[serde(default)]
        seed: u64,
    },
    LambdaAblation {
        environment: DistractorSpec,
        #[serde(default)]
        engine: EngineConfig,
        lambdas: Vec<f64>,
        epochs: u32,
        #[serde(default = "default_seeds")]
        seeds: Vec<u64>,
        #[serde(default = "default_min_gain")]
        min_gain: f64,
    },
    Gem {
        environment: DistractorSpec,
        #[serde(default)]
        engine: EngineConfig,
        epochs: u32,
        #[serde(default = "default_seeds")]
        seeds: Vec<u64>,
        #[serde(default = "default_churn")]
        max_final_churn: f64,
        #[serde(default = "default_min_selections")]
        min_selections: usize,
        #[serde(default = "default_three")]
        tolerance_se: f64,
        #[serde(default = "default_min_r")]
        min_correlation: f64,
        #[serde(default)]
        burn_in: usize,
    },
    Lifelong {
        environment: DistractorSpec,
        variants: Vec<Variant>,
        epochs: u32,
        #[serde(default = "default_seeds")]
        seeds: Vec<u64>,
        #[serde(default = "default_sync_gap")]
        max_sync_gap: f64,
    },
}

fn default_bootstrap() -> usize {
    200
}
fn default_bound_slack() -> f64 {
    1.10
}
fn default_three() -> f64 {
    3.0
}
fn default_min_gain() -> f64 {
    0.10
}
fn default_churn() -> f64 {
    0.05
}
fn default_min_selections() -> usize {
    100
}
fn default_min_r() -> f64 {
    0.8
}
fn default_sync_gap() -> f64 {
    0.15
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MemrlError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MemrlError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Convergence { .. } => "convergence",
            ExperimentConfig::Variance { .. } => "variance",
            ExperimentConfig::LambdaAblation { .. } => "lambda_ablation",
            ExperimentConfig::Gem { .. } => "gem",
            ExperimentConfig::Lifelong { .. } => "lifelong",
        }
    }

    pub fn config_hash(&self) -> String {
        hash_json(self)
    }

    /// Replaces the base seed (theory experiments) or the seed list
    /// (simulation experiments, which then use `seed..seed + n`).
    pub fn with_seed(mut self, base: u64) -> Self {
        match &mut self {
            ExperimentConfig::Convergence { seed, .. } | ExperimentConfig::Variance { seed, .. } => {
                *seed = base;
            }
            ExperimentConfig::LambdaAblation { seeds, .. }
            | ExperimentConfig::Gem { seeds, .. }
            | ExperimentConfig::Lifelong { seeds, .. } => {
                let n = seeds.len() as u64;
                *seeds = (base..base + n).collect();
            }
        }
        self
    }

    /// Runs the experiment and packages curves, a JSON summary and the
    /// pass/fail checks into a report.
    pub fn run(&self) -> Result<ExperimentReport> {
        let hash = self.config_hash();
        let mut series = Vec::new();
        let mut checks = Vec::new();
        let mut bins = Vec::new();
        let summary = match self {
            ExperimentConfig::Convergence {
                alphas,
                beta,
                q0,
                steps,
                n_seeds,
                seed,
            } => {
                let mut results = Vec::new();
                for &alpha in alphas {
                    let r = experiment_convergence(alpha, *beta, *q0, *steps, *n_seeds, *seed)?;
                    let tag = format!("alpha_{alpha}");
                    series.push(MetricSeries::new(
                        format!("mean_q_{tag}"),
                        r.rows.iter().skip(1).map(|row| row.empirical_mean).collect(),
                        &hash,
                        *seed,
                    ));
                    series.push(MetricSeries::new(
                        format!("theory_q_{tag}"),
                        r.rows.iter().skip(1).map(|row| row.theoretical).collect(),
                        &hash,
                        *seed,
                    ));
                    checks.push(Check::new(
                        format!("mean_within_4se_{tag}"),
                        r.within_tolerance(),
                        format!("max gap {:.3e} vs tolerance {:.3e}", r.max_gap(), r.tolerance),
                    ));
                    results.push(json!({
                        "alpha": alpha,
                        "max_gap": r.max_gap(),
                        "tolerance": r.tolerance,
                        "final_mean": r.rows.last().map(|x| x.empirical_mean),
                        "final_theory": r.rows.last().map(|x| x.theoretical),
                    }));
                }
                json!({ "beta": beta, "q0": q0, "n_seeds": n_seeds, "results": results })
            }
            ExperimentConfig::Variance {
                alphas,
                reward_variance,
                steps,
                n_seeds,
                checkpoints,
                bootstrap,
                bound_slack,
                max_z,
                seed,
            } => {
                let mut results = Vec::new();
                for &alpha in alphas {
                    let r = experiment_variance(
                        alpha,
                        *reward_variance,
                        *steps,
                        *n_seeds,
                        checkpoints,
                        *bootstrap,
                        *seed,
                    )?;
                    let tag = format!("alpha_{alpha}");
                    checks.push(Check::new(
                        format!("steady_variance_bound_{tag}"),
                        r.steady_variance <= bound_slack * r.bound,
                        format!("{:.5} vs {:.5} x {bound_slack}", r.steady_variance, r.bound),
                    ));
                    let worst = r.curve.iter().map(|c| c.z).fold(0.0, f64::max);
                    checks.push(Check::new(
                        format!("finite_t_variance_{tag}"),
                        worst <= *max_z,
                        format!("max |z| {worst:.2} over t = {checkpoints:?}"),
                    ));
                    series.push(MetricSeries::new(
                        format!("variance_{tag}"),
                        r.curve.iter().map(|c| c.empirical).collect(),
                        &hash,
                        *seed,
                    ));
                    results.push(serde_json::to_value(&r).map_err(|e| MemrlError::invalid(e.to_string()))?);
                }
                json!({ "reward_variance": reward_variance, "results": results })
            }
            ExperimentConfig::LambdaAblation {
                environment,
                engine,
                lambdas,
                epochs,
                seeds,
                min_gain,
            } => {
                let env = environment.build()?;
                let r = experiment_lambda_ablation(&env, engine, lambdas, *epochs, seeds)?;
                let seed0 = seeds[0];
                for c in &r.curves {
                    series.push(MetricSeries::new(
                        format!("accuracy_lambda_{}", c.lambda),
                        c.accuracy.clone(),
                        &hash,
                        seed0,
                    ));
                    series.push(MetricSeries::new(
                        format!("csr_lambda_{}", c.lambda),
                        c.csr.clone(),
                        &hash,
                        seed0,
                    ));
                }
                if let (Some(sim), Some(bal), Some(greedy)) =
                    (r.curve(0.0), r.curve(0.5), r.curve(1.0))
                {
                    let gain = bal.mean_final_accuracy - sim.mean_final_accuracy;
                    checks.push(Check::new(
                        "balanced_beats_similarity",
                        gain >= *min_gain,
                        format!(
                            "final accuracy {:.3} vs {:.3} (gain {gain:.3}, need {min_gain})",
                            bal.mean_final_accuracy, sim.mean_final_accuracy
                        ),
                    ));
                    checks.push(Check::new(
                        "balanced_csr_not_below_greedy",
                        bal.mean_final_csr >= greedy.mean_final_csr,
                        format!("csr {:.3} vs {:.3}", bal.mean_final_csr, greedy.mean_final_csr),
                    ));
                }
                serde_json::to_value(&r).map_err(|e| MemrlError::invalid(e.to_string()))?
            }
            ExperimentConfig::Gem {
                environment,
                engine,
                epochs,
                seeds,
                max_final_churn,
                min_selections,
                tolerance_se,
                min_correlation,
                burn_in,
            } => {
                let env = environment.build()?;
                let options = GemOptions {
                    min_selections: *min_selections,
                    tolerance_se: *tolerance_se,
                    ..GemOptions::default()
                };
                let r = experiment_gem_stationarity(&env, engine, *epochs, seeds, options)?;
                let seed0 = seeds[0];
                let mut churn = vec![f64::NAN];
                churn.extend(&r.mean_churn);
                series.push(MetricSeries::new("churn", churn, &hash, seed0));
                series.push(MetricSeries::new("objective", r.mean_objective.clone(), &hash, seed0));
                checks.push(Check::new(
                    "final_churn_below_threshold",
                    r.max_final_churn() < *max_final_churn,
                    format!(
                        "worst seed {:.3}, mean {:.3}, threshold {max_final_churn}",
                        r.max_final_churn(),
                        r.final_churn()
                    ),
                ));
                let (n, bad) = r
                    .value_checks()
                    .fold((0, 0), |(n, b), v| (n + 1, b + usize::from(!v.within)));
                checks.push(Check::new(
                    "utility_matches_mean_reward",
                    n > 0 && bad == 0,
                    format!("{bad} of {n} memories outside {tolerance_se} standard errors"),
                ));
                let rs: Vec<f64> = r.seeds.iter().map(|s| s.q_success_r).collect();
                let worst_r = rs.iter().copied().fold(f64::INFINITY, f64::min);
                checks.push(Check::new(
                    "q_success_correlation",
                    worst_r >= *min_correlation,
                    format!("min r over seeds {worst_r:.3}, mean {:.3}", mean(&rs)),
                ));
                // Bins of the first seed's final bank, for the composition table.
                let mut bank = SimBank::seeded(&env, engine.q_init)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed0);
                for epoch in 1..=*epochs {
                    run_epoch(&env, &mut bank, engine, epoch, &mut rng)?;
                }
                bins = q_bin_composition(bank.store.bank(), 0.2)?;
                json!({
                    "final_churn_mean": r.final_churn(),
                    "final_churn_max": r.max_final_churn(),
                    "churn_non_increasing_after_burn_in": r.smoothed_churn_non_increasing(*burn_in, 3),
                    "detail": r,
                })
            }
            ExperimentConfig::Lifelong {
                environment,
                variants,
                epochs,
                seeds,
                max_sync_gap,
            } => {
                let env = environment.build()?;
                let r = experiment_lifelong(&env, variants, *epochs, seeds)?;
                let seed0 = seeds[0];
                for v in &r.variants {
                    let mut f = vec![f64::NAN];
                    f.extend(&v.forgetting_curve);
                    series.push(MetricSeries::new(format!("forgetting_{}", v.name), f, &hash, seed0));
                    series.push(MetricSeries::new(
                        format!("accuracy_{}", v.name),
                        v.accuracy.clone(),
                        &hash,
                        seed0,
                    ));
                    series.push(MetricSeries::new(format!("csr_{}", v.name), v.csr.clone(), &hash, seed0));
                }
                let rates: Vec<f64> = r.variants.iter().map(|v| v.mean_forgetting).collect();
                checks.push(Check::new(
                    "forgetting_ordered",
                    rates.windows(2).all(|w| w[0] < w[1]),
                    r.variants
                        .iter()
                        .map(|v| format!("{} {:.4}", v.name, v.mean_forgetting))
                        .collect::<Vec<_>>()
                        .join(" < "),
                ));
                if let Some(first) = r.variants.first() {
                    checks.push(Check::new(
                        "csr_accuracy_synchronized",
                        first.final_gap <= *max_sync_gap,
                        format!("{} final gap {:.3}", first.name, first.final_gap),
                    ));
                }
                serde_json::to_value(&r).map_err(|e| MemrlError::invalid(e.to_string()))?
            }
        };
        Ok(ExperimentReport {
            experiment: self.name().to_string(),
            config_hash: hash,
            series,
            summary,
            bins,
            checks,
        })
    }
}
