//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::{map_pool, order_by, random_pool, total_variation};
use memrl_core::retrieval::{
    boltzmann_distribution, phase_b_select, retrieve, sample_boltzmann, PoolEntry,
};
use memrl_core::simulation::env::{RewardTable, SeedMemory};
use memrl_core::simulation::experiments::{
    experiment_convergence, experiment_gem_stationarity, experiment_lambda_ablation,
    experiment_lifelong, experiment_variance, GemOptions,
};
use memrl_core::simulation::{
    run_episode, ExperimentConfig, NoiseModel, SimBank, SyntheticEnvironment, SyntheticTask,
};
use memrl_core::store::replay;
use memrl_core::{
    embed_deterministic, mc_update, td_update, CandidatePool, EmbeddingVector, EngineConfig,
    IntentQuery, MemoryStore, OutcomeLabel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config")
}

fn convergence() -> Outcome {
    let (beta, q0, n) = (0.7f64, 0.0, 10_000usize);
    let tol = 4.0 * (beta * (1.0 - beta)).sqrt() / (n as f64).sqrt();
    let mut worst: f64 = 0.0;
    for (i, alpha) in [0.05, 0.1, 0.3, 1.0].into_iter().enumerate() {
        let r = experiment_convergence(alpha, beta, q0, 100, n, 101 + i as u64).unwrap();
        for row in &r.rows {
            let expected = beta - (1.0 - alpha).powi(row.t as i32) * (beta - q0);
            worst = worst.max((row.empirical_mean - expected).abs() / tol);
        }
    }
    (worst <= 1.0, format!("max |mean - closed form| = {worst:.3} x 4sigma/sqrt(N)"))
}

fn variance() -> Outcome {
    let sigma2 = 0.25;
    let checkpoints = [1, 5, 20, 100];
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, alpha) in [0.05, 0.1, 0.3].into_iter().enumerate() {
        let r = experiment_variance(alpha, sigma2, 300, 10_000, &checkpoints, 200, 201 + i as u64).unwrap();
        let bound = alpha / (2.0 - alpha) * sigma2;
        let steady_ok = r.steady_variance <= 1.10 * bound;
        let mut max_z: f64 = 0.0;
        for row in &r.curve {
            if !checkpoints.contains(&row.t) {
                continue;
            }
            let decay = (1.0 - alpha) * (1.0 - alpha);
            let unrolled = sigma2 * alpha * alpha * (1.0 - decay.powi(row.t as i32)) / (1.0 - decay);
            max_z = max_z.max((row.empirical - unrolled).abs() / row.bootstrap_se);
        }
        let covered = r.curve.iter().filter(|row| checkpoints.contains(&row.t)).count() == checkpoints.len();
        ok &= steady_ok && max_z <= 3.0 && covered;
        notes.push(format!("a={alpha}: steady/bound {:.3}, max|z| {max_z:.2}", r.steady_variance / bound));
    }
    (ok, notes.join("; "))
}

fn ids(p: &CandidatePool, lambda: f64, k2: usize) -> Vec<u64> {
    let q = IntentQuery::new("", EmbeddingVector::from_unit(vec![1.0, 0.0]).unwrap());
    phase_b_select(p, &q, lambda, k2).unwrap().ids()
}

fn ranking_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = 0;
    for _ in 0..10_000 {
        let p = random_pool(&mut rng);
        let n = p.len();
        let lambda = if rng.random_bool(0.2) { 0.5 } else { rng.random_range(0.0..=1.0) };
        let (a, b) = (rng.random_range(0.01..50.0), rng.random_range(-10.0..10.0));
        let base = ids(&p, lambda, n);
        let q_map = map_pool(&p, |e| PoolEntry { raw_q: a * e.raw_q + b, ..*e });
        let s_map = map_pool(&p, |e| PoolEntry { similarity: a * e.similarity + b, ..*e });
        let k2 = rng.random_range(1..=n);
        let checks = [
            ids(&q_map, lambda, n) == base,
            ids(&s_map, lambda, n) == base,
            ids(&q_map, lambda, k2) == base[..k2],
            ids(&p, 0.0, n) == order_by(&p, |e| e.similarity),
            ids(&p, 1.0, n) == order_by(&p, |e| e.raw_q),
        ];
        failures += checks.iter().filter(|c| !**c).count();
    }
    (failures == 0, format!("10^4 pools, {failures} mismatches"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0usize;
    for _ in 0..1_000_000 {
        let q: f64 = rng.random_range(-1.0..=1.0);
        let r: f64 = rng.random_range(-1.0..=1.0);
        let a: f64 = rng.random_range(1e-6..=1.0);
        let g: f64 = rng.random_range(0.0..0.999);
        let next: f64 = rng.random_range(-1.0..=1.0);
        let mc_oracle = {
            let innovation = r - q;
            q + a * innovation
        };
        let td_oracle = {
            let target = r + g * next;
            q + a * (target - q)
        };
        let mc = mc_update(q, r, a).unwrap();
        mismatches += usize::from(mc.to_bits() != mc_oracle.to_bits());
        mismatches += usize::from(td_update(q, r, g, next, a).unwrap().to_bits() != td_oracle.to_bits());
        mismatches += usize::from(td_update(q, r, g, 0.0, a).unwrap().to_bits() != mc.to_bits());
    }
    (mismatches == 0, format!("10^6 inputs, {mismatches} bit mismatches"))
}

fn lambda_ablation() -> Outcome {
    let ExperimentConfig::LambdaAblation { environment, engine, epochs, .. } = shipped("lambda_ablation") else {
        return (false, "shipped config is not a lambda ablation".into());
    };
    let env = environment.build().unwrap();
    let seeds: Vec<u64> = (1..=10).collect();
    let r = experiment_lambda_ablation(&env, &engine, &[0.0, 0.5, 1.0], epochs, &seeds).unwrap();
    let (sim, bal, greedy) = (r.curve(0.0).unwrap(), r.curve(0.5).unwrap(), r.curve(1.0).unwrap());
    let gain = bal.mean_final_accuracy - sim.mean_final_accuracy;
    (
        gain >= 0.10 && bal.mean_final_csr >= greedy.mean_final_csr,
        format!(
            "final acc 0.5: {:.3} vs 0.0: {:.3} (gain {gain:.3}); CSR 0.5: {:.3} vs 1.0: {:.3}",
            bal.mean_final_accuracy, sim.mean_final_accuracy, bal.mean_final_csr, greedy.mean_final_csr
        ),
    )
}

fn lifelong() -> Outcome {
    let ExperimentConfig::Lifelong { environment, variants, epochs, .. } = shipped("lifelong") else {
        return (false, "shipped config is not a lifelong run".into());
    };
    let env = environment.build().unwrap();
    let seeds: Vec<u64> = (1..=10).collect();
    let r = experiment_lifelong(&env, &variants, epochs, &seeds).unwrap();
    let f = |name: &str| r.variant(name).unwrap().mean_forgetting;
    let (full, sim, raw) = (f("memrl"), f("similarity_only"), f("no_norm_no_gate"));
    let memrl = r.variant("memrl").unwrap();
    let gap = memrl.csr.last().unwrap() - memrl.accuracy.last().unwrap();
    (
        full < sim && sim < raw && gap <= 0.15,
        format!("forgetting {full:.4} < {sim:.4} < {raw:.4}; final CSR-accuracy gap {gap:.3}"),
    )
}

struct Gem {
    min_r: f64,
    worst_churn: f64,
    checked: usize,
    outside: usize,
}

fn gem_run() -> Gem {
    let ExperimentConfig::Gem { environment, engine, .. } = shipped("gem") else {
        panic!("shipped gem config has the wrong kind");
    };
    let env = environment.build().unwrap();
    let seeds: Vec<u64> = (1..=10).collect();
    let r = experiment_gem_stationarity(&env, &engine, 20, &seeds, GemOptions::default()).unwrap();
    let mut gem = Gem {
        min_r: f64::INFINITY,
        worst_churn: 0.0,
        checked: 0,
        outside: 0,
    };
    for s in &r.seeds {
        gem.min_r = gem.min_r.min(s.q_success_r);
        gem.worst_churn = gem.worst_churn.max(*s.churn.last().unwrap());
        for v in s.value_checks.iter().filter(|v| v.selections >= 100) {
            gem.checked += 1;
            gem.outside += usize::from((v.q - v.mean_reward).abs() > 3.0 * v.standard_error);
        }
    }
    gem
}

fn q_success(gem: &Gem) -> Outcome {
    (gem.min_r >= 0.8, format!("min Pearson r over 10 seeds {:.3}", gem.min_r))
}

fn gem_stationarity(gem: &Gem) -> Outcome {
    (
        gem.worst_churn < 0.05 && gem.checked > 0 && gem.outside == 0,
        format!(
            "worst final churn {:.3}; {} of {} memories outside 3 SE",
            gem.worst_churn, gem.outside, gem.checked
        ),
    )
}

fn boltzmann_fidelity() -> Outcome {
    let pools = [
        [(0.9, 1.0), (0.8, 0.0), (0.7, -1.0), (0.5, 0.5), (0.4, 0.2)],
        [(0.5, 0.3), (0.5, 0.3), (0.5, 0.3), (0.5, 0.3), (0.5, 0.3)],
        [(1.0, -1.0), (0.35, 1.0), (0.6, 0.9), (0.99, -0.2), (0.31, 0.0)],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    for (i, rows) in pools.iter().enumerate() {
        let pool = CandidatePool::new(
            rows.iter()
                .enumerate()
                .map(|(j, &(similarity, raw_q))| PoolEntry {
                    triplet_id: j as u64 + 1,
                    similarity,
                    raw_q,
                })
                .collect(),
        );
        let temperature = [1.0, 0.5, 3.0][i];
        // analytic target computed here, not by the library
        let weights: Vec<f64> = rows.iter().map(|&(s, q)| s.exp() * (temperature * q).exp()).collect();
        let total: f64 = weights.iter().sum();
        let analytic: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let lib = boltzmann_distribution(&pool, temperature).unwrap();
        worst = worst.max(total_variation(&lib, &analytic) * 1e6);
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_boltzmann(&pool, temperature, &mut rng).unwrap() as usize - 1] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
        worst = worst.max(total_variation(&freq, &analytic));
    }
    (worst < 0.01, format!("max total variation {worst:.4} over 3 pools x 10^5 draws"))
}

fn persistence_and_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.jsonl");
    let dim = 16;
    let (mut live, _) = MemoryStore::open(&path, dim).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for i in 0..10_000u32 {
        let n = live.len() as u64;
        if n == 0 || rng.random_bool(0.3) {
            let text = format!("intent {i} {}", rng.random::<u16>());
            let emb = embed_deterministic(&text, dim, 5).unwrap();
            let label = [OutcomeLabel::Success, OutcomeLabel::Failure, OutcomeLabel::Unlabeled][i as usize % 3];
            live.insert_triplet(&text, &emb, "exp", rng.random_range(-1.0..=1.0), label).unwrap();
        } else {
            let id = rng.random_range(1..=n);
            live.update_utility(id, rng.random_range(-1.0..=1.0)).unwrap();
        }
    }
    live.flush().unwrap();
    let r = replay(&path, None, dim).unwrap();
    let same = r.stopped_at.is_none()
        && r.bank == *live.bank()
        && r.bank.triplets().iter().zip(live.bank().triplets()).all(|(a, b)| {
            a.utility.to_bits() == b.utility.to_bits()
                && a.intent_embedding.values().iter().zip(b.intent_embedding.values()).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let cfg = shipped("gem");
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let (csv, json) = cfg.run().unwrap().write(&out).unwrap();
        bytes.push((std::fs::read(csv).unwrap(), std::fs::read(json).unwrap()));
    }
    let reports_equal = bytes[0] == bytes[1];
    (
        same && reports_equal,
        format!(
            "replay of 10^4 ops bit-exact: {same}; repeated run reports byte-identical: {reports_equal}"
        ),
    )
}

fn fallback() -> Outcome {
    let dim = 32;
    let task = SyntheticTask::new(1, "tidy the garage", 0, dim, 3).unwrap();
    let far = |text: &str, skill| SeedMemory {
        intent_text: text.into(),
        experience: "unrelated".into(),
        skill,
        embedding: embed_deterministic(text, dim, 3).unwrap(),
    };
    let p0 = 0.3;
    let env = SyntheticEnvironment {
        name: "fallback".into(),
        memories: vec![far("quantum xylophone", 0), far("vivid zebra mural", 0)],
        tasks: vec![task.clone()],
        mean_reward_table: RewardTable::new(1.0).unwrap(),
        noise_model: NoiseModel::Bernoulli,
        base_rate: p0,
        write_back: None,
        dim,
        rng_seed: 0,
    };
    let cfg = EngineConfig::from_json(r#"{"delta": 0.5}"#).unwrap();
    let mut bank = SimBank::seeded(&env, 0.0).unwrap();
    let all_below = bank
        .store
        .bank()
        .triplets()
        .iter()
        .all(|t| memrl_core::cosine_similarity(&t.intent_embedding, &task.embedding).unwrap() <= 0.5);
    let ctx = retrieve(bank.store.bank(), &task.query(1), cfg.retrieval_params()).unwrap();
    let before = bank.store.bank().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let n = 20_000;
    let mut wins = 0usize;
    let mut updates = 0usize;
    for _ in 0..n {
        let log = run_episode(&env, &mut bank, &task, &cfg, 1, None, &mut rng).unwrap();
        wins += usize::from(log.success);
        updates += log.updates.len() + log.selected.len();
    }
    let rate = wins as f64 / n as f64;
    let se = (p0 * (1.0 - p0) / n as f64).sqrt();
    let ok = all_below && ctx.is_empty() && updates == 0 && *bank.store.bank() == before && (rate - p0).abs() <= 4.0 * se;
    (ok, format!("empty context, {updates} updates, success rate {rate:.4} vs p0 {p0} (4 SE = {:.4})", 4.0 * se))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let gem = std::cell::OnceCell::new();
    let criteria: Vec<Criterion> = vec![
        ("exponential convergence of mean utility", Box::new(convergence)),
        ("variance bound and unrolled finite-t variance", Box::new(variance)),
        ("ranking invariances", Box::new(ranking_invariance)),
        ("update-rule oracle equivalence", Box::new(oracle_equivalence)),
        ("lambda ablation", Box::new(lambda_ablation)),
        ("forgetting-rate ordering and CSR sync", Box::new(lifelong)),
        ("utility/success correlation", Box::new(|| q_success(gem.get_or_init(gem_run)))),
        ("GEM stationarity", Box::new(|| gem_stationarity(gem.get_or_init(gem_run)))),
        ("Boltzmann sampling fidelity", Box::new(boltzmann_fidelity)),
        ("persistence and determinism", Box::new(persistence_and_determinism)),
        ("empty-pool fallback", Box::new(fallback)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = check();
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {} {name}: {detail} ({:.1}s)",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
