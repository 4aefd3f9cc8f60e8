use memrl_core::learning::{apply_feedback, apply_feedback_ids, record_trajectory, record_trajectory_with, ExperienceSummarizer, WriteBack};
use memrl_core::retrieval::{retrieve, RetrievalParams};
use memrl_core::{
    embed_deterministic, mc_update, td_update, IntentQuery, LearningConfig, MemoryStore, MemrlError,
    OutcomeLabel, RewardSignal,
};
use proptest::prelude::*;

// Oracle: the update rules written out step by step.
fn oracle_mc(q: f64, r: f64, a: f64) -> f64 {
    let innovation = r - q;
    let step = a * innovation;
    q + step
}

fn oracle_td(q: f64, r: f64, g: f64, next: f64, a: f64) -> f64 {
    let discounted = g * next;
    let target = r + discounted;
    let error = target - q;
    q + a * error
}

#[test]
fn update_examples() {
    assert_eq!(mc_update(0.5, 1.0, 0.1).unwrap(), 0.55);
    assert_eq!(mc_update(0.3, -0.7, 1.0).unwrap(), -0.7);
    assert_eq!(mc_update(0.42, 0.42, 0.3).unwrap(), 0.42);
    assert_eq!(td_update(0.2, 0.5, 0.9, 0.4, 0.5).unwrap(), 0.53);
    assert_eq!(td_update(0.2, 0.5, 0.0, 0.9, 0.5).unwrap(), mc_update(0.2, 0.5, 0.5).unwrap());
    assert_eq!(mc_update(0.0, 1.0, 0.1).unwrap(), 0.1);
    assert_eq!(mc_update(0.1, 1.0, 0.1).unwrap(), 0.19);
}

#[test]
fn non_finite_and_out_of_domain_inputs_are_rejected() {
    assert!(mc_update(f64::NAN, 1.0, 0.1).is_err());
    assert!(mc_update(0.0, f64::INFINITY, 0.1).is_err());
    assert!(mc_update(0.0, 1.0, 0.0).is_err());
    assert!(mc_update(0.0, 1.0, 1.5).is_err());
    assert!(td_update(0.0, 1.0, 1.0, 0.0, 0.1).is_err());
    assert!(td_update(0.0, 1.0, 0.5, f64::NAN, 0.1).is_err());
    assert!(RewardSignal::new(1.5, "t", 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2048))]

    #[test]
    fn updates_match_oracle(
        q in -1.0f64..=1.0, r in -1.0f64..=1.0, a in 1e-6f64..=1.0,
        g in 0.0f64..0.999, next in -1.0f64..=1.0,
    ) {
        prop_assert_eq!(mc_update(q, r, a).unwrap().to_bits(), oracle_mc(q, r, a).to_bits());
        prop_assert_eq!(td_update(q, r, g, next, a).unwrap().to_bits(), oracle_td(q, r, g, next, a).to_bits());
        prop_assert_eq!(td_update(q, r, g, 0.0, a).unwrap().to_bits(), mc_update(q, r, a).unwrap().to_bits());
    }

    #[test]
    fn fixed_point(q in -1e6f64..1e6, a in 1e-9f64..=1.0) {
        prop_assert_eq!(mc_update(q, q, a).unwrap(), q);
    }

    #[test]
    fn utilities_stay_bounded(
        q0 in -1.0f64..=1.0,
        a in 1e-9f64..=1.0,
        rewards in prop::collection::vec(-1.0f64..=1.0, 1..200),
    ) {
        let mut q = q0;
        for r in rewards {
            q = mc_update(q, r, a).unwrap();
            prop_assert!((-1.0..=1.0).contains(&q), "q = {}", q);
        }
    }

    #[test]
    fn extreme_inputs_stay_finite(
        q in -1e300f64..1e300,
        r in prop::sample::select(vec![-1.0, -1e-300, 0.0, 1e-300, 1.0]),
        a in prop::sample::select(vec![f64::MIN_POSITIVE, 1e-300, 0.5, 1.0 - f64::EPSILON, 1.0]),
    ) {
        prop_assert!(mc_update(q, r, a).unwrap().is_finite());
    }
}

const DIM: usize = 16;

fn q(text: &str) -> IntentQuery {
    IntentQuery::new(text, embed_deterministic(text, DIM, 2).unwrap())
}

fn store_with(n: usize) -> MemoryStore {
    let mut s = MemoryStore::in_memory(DIM);
    for i in 0..n {
        let t = format!("memory number {i}");
        s.insert_triplet(&t, &q(&t).embedding, "e", 0.0, OutcomeLabel::Unlabeled).unwrap();
    }
    s
}

#[test]
fn feedback_updates_exactly_the_context() {
    let mut s = store_with(6);
    let params = RetrievalParams {
        delta: 0.0,
        k1: 6,
        k2: 2,
        ..RetrievalParams::default()
    };
    let ctx = retrieve(s.bank(), &q("memory number 3"), params).unwrap();
    assert_eq!(ctx.selected.len(), 2);
    let before = s.bank().clone();
    let updates = apply_feedback(&mut s, &ctx, &RewardSignal::new(1.0, "t", 1).unwrap(), &LearningConfig::default(), 0.0).unwrap();
    assert_eq!(updates.len(), 2);
    for u in &updates {
        assert_eq!((u.old_q, u.new_q), (0.0, 0.1));
    }
    let changed: Vec<u64> = s
        .bank()
        .triplets()
        .iter()
        .zip(before.triplets())
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.id)
        .collect();
    let mut expected = ctx.ids();
    expected.sort_unstable();
    assert_eq!(changed, expected);
}

#[test]
fn empty_context_and_bad_batches_change_nothing() {
    let mut s = store_with(3);
    let before = s.bank().clone();
    let cfg = LearningConfig::default();
    assert!(apply_feedback_ids(&mut s, &[], 1.0, &cfg, 0.0).unwrap().is_empty());
    assert!(matches!(apply_feedback_ids(&mut s, &[1, 99], 1.0, &cfg, 0.0), Err(MemrlError::NotFound(99))));
    assert!(apply_feedback_ids(&mut s, &[1, 2], 1.5, &cfg, 0.0).is_err());
    assert!(apply_feedback_ids(&mut s, &[1, 1], 1.0, &cfg, 0.0).is_err());
    assert_eq!(s.bank(), &before);
}

struct Upper;

impl ExperienceSummarizer for Upper {
    fn summarize(&self, trajectory: &str) -> String {
        trajectory.to_uppercase()
    }
}

#[test]
fn write_back_honours_config() {
    let mut s = store_with(0);
    let cfg = LearningConfig {
        q_init: 0.25,
        ..LearningConfig::default()
    };
    let id = record_trajectory(&mut s, &q("sort blocks"), "did it", OutcomeLabel::Success, &cfg)
        .unwrap()
        .id()
        .unwrap();
    assert_eq!(s.len(), 1);
    let t = s.get(id).unwrap();
    assert_eq!((t.utility, t.outcome_label, t.intent_text.as_str()), (0.25, OutcomeLabel::Success, "sort blocks"));

    let skip = LearningConfig {
        store_failures: false,
        ..cfg
    };
    assert_eq!(
        record_trajectory(&mut s, &q("x"), "failed", OutcomeLabel::Failure, &skip).unwrap(),
        WriteBack::Skipped
    );
    assert_eq!(s.len(), 1);
    let id = record_trajectory_with(&mut s, &q("y"), "raw log", OutcomeLabel::Failure, &cfg, &Upper)
        .unwrap()
        .id()
        .unwrap();
    assert_eq!(s.get(id).unwrap().experience, "RAW LOG");
    assert!(record_trajectory(&mut s, &q("z"), "", OutcomeLabel::Success, &cfg).is_err());
}
