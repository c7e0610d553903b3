use std::collections::BTreeSet;

use omniseq::evaluation::{evaluate, evaluate_with, test_holdouts, EvalConfig, ExclusionPolicy};
use omniseq::model::{Checkpoint, ModelConfig, ModelParams, Variant};
use omniseq::pipeline::batch_sequences;
use omniseq::synthgen::{generate, GenConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64) -> (Vec<omniseq::domain::HybridSequence>, usize) {
    let cfg = GenConfig {
        users: 40,
        catalog_size: 400,
        intents: 8,
        items_per_intent: 50,
        seed,
        ..GenConfig::default()
    };
    let corpus = generate(&cfg).unwrap();
    (batch_sequences(&corpus.online, &corpus.store, 90).unwrap(), cfg.catalog_size)
}

fn checkpoint(variant: Variant, catalog: usize) -> Checkpoint {
    let cfg = ModelConfig::new(catalog, variant.encoder()).with_dim(8);
    Checkpoint {
        variant,
        seed: 3,
        params: ModelParams::init(cfg, 3).unwrap(),
    }
}

#[test]
fn records_respect_the_candidate_contract() {
    let (data, catalog) = dataset(1);
    let summary = evaluate(&checkpoint(Variant::AttnEnc, catalog), &data, &EvalConfig::new(5)).unwrap();
    assert_eq!(summary.users + summary.skipped, data.len());
    assert_eq!(summary.records.len(), summary.users);
    let (holdouts, _) = test_holdouts(&data);
    for (r, h) in summary.records.iter().zip(&holdouts) {
        assert_eq!(r.user, h.user);
        assert_eq!(r.candidates.len(), 101);
        assert_eq!(r.candidates[0], r.target);
        let distinct: BTreeSet<_> = r.candidates.iter().collect();
        assert_eq!(distinct.len(), 101);
        assert!(r.candidates.iter().all(|c| c.index() < catalog));
        assert!(r.candidates[1..].iter().all(|c| !h.interacted.contains(c)));
        assert!((1..=101).contains(&r.rank));
    }
    assert!(summary.ndcg10 <= summary.hit10);
}

#[test]
fn same_seed_same_metrics() {
    let (data, catalog) = dataset(2);
    let ckpt = checkpoint(Variant::AvgEnc, catalog);
    let a = evaluate(&ckpt, &data, &EvalConfig::new(8)).unwrap();
    let b = evaluate(&ckpt, &data, &EvalConfig::new(8)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hit10.to_bits(), b.hit10.to_bits());
    let c = evaluate(&ckpt, &data, &EvalConfig::new(9)).unwrap();
    assert_ne!(a.records[0].candidates, c.records[0].candidates);
}

#[test]
fn variants_share_candidates() {
    let (data, catalog) = dataset(3);
    let cfg = EvalConfig::new(1);
    let base = evaluate(&checkpoint(Variant::OnlineOnly, catalog), &data, &cfg).unwrap();
    for v in [Variant::WStore, Variant::AvgEnc, Variant::AttnEnc] {
        let other = evaluate(&checkpoint(v, catalog), &data, &cfg).unwrap();
        for (a, b) in base.records.iter().zip(&other.records) {
            assert_eq!(a.candidates, b.candidates);
        }
    }
}

#[test]
fn target_only_policy_may_sample_history() {
    let (data, catalog) = dataset(4);
    let (holdouts, _) = test_holdouts(&data);
    let cfg = EvalConfig {
        policy: ExclusionPolicy::TargetOnly,
        ..EvalConfig::new(0)
    };
    let summary = evaluate_with(&holdouts, &cfg, catalog, |_, c| Ok(vec![0.0; c.len()])).unwrap();
    assert!(summary.records.iter().all(|r| r.rank == 101));
    let from_history = summary
        .records
        .iter()
        .zip(&holdouts)
        .filter(|(r, h)| r.candidates[1..].iter().any(|c| h.interacted.contains(c)))
        .count();
    assert!(from_history > 0);
    assert!(summary.records.iter().all(|r| !r.candidates[1..].contains(&r.target)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ndcg_never_exceeds_hit(seed in any::<u64>(), eval_seed in any::<u64>()) {
        let (data, catalog) = dataset(seed % 4);
        let (holdouts, _) = test_holdouts(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let summary = evaluate_with(&holdouts, &EvalConfig::new(eval_seed), catalog, |_, c| {
            Ok((0..c.len()).map(|_| rng.random_range(0..5) as f64).collect())
        })
        .unwrap();
        prop_assert!(summary.ndcg10 <= summary.hit10);
        prop_assert!((0.0..=1.0).contains(&summary.hit10));
        for r in &summary.records {
            prop_assert!(!r.candidates.iter().any(|c| c.index() >= catalog));
        }
    }
}
