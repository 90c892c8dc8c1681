use std::collections::BTreeMap;

use fedrec_core::contrastive::{item_contrastive_loss, user_contrastive_loss};
use fedrec_core::data::sample_negatives;
use fedrec_core::defense::{clip_to_norm, AggregationRule, Aggregator, HicsConfig, ItemDenominator};
use fedrec_core::federation::plan_round;
use fedrec_core::metrics::{exposure_ratio, ndcg_at_k, recall_at_k};
use fedrec_core::model::PublicParams;
use fedrec_core::numeric::{cosine_similarity, norm, AdamState, DenseMatrix, Mlp};
use fedrec_core::{ClientId, ExperimentConfig, GradientUpdate};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ITEMS: usize = 6;
const DIM: usize = 2;

fn params() -> PublicParams {
    PublicParams {
        items: DenseMatrix::zeros(ITEMS, DIM),
        mlp: Mlp::zeros(&[2 * DIM, 2]),
    }
}

fn update_strategy(mlp_len: usize) -> impl Strategy<Value = Vec<GradientUpdate>> {
    let one = (
        prop::collection::btree_map(0..ITEMS, prop::collection::vec(-3.0..3.0f64, DIM), 0..ITEMS),
        prop::collection::vec(-3.0..3.0f64, mlp_len),
    );
    prop::collection::vec(one, 1..7).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(c, (item_deltas, mlp_delta))| GradientUpdate {
                client_id: ClientId(c * 3 + 1),
                item_deltas,
                mlp_delta,
            })
            .collect()
    })
}

fn rules() -> Vec<AggregationRule> {
    vec![
        AggregationRule::FedAvg,
        AggregationRule::Krum,
        AggregationRule::Median,
        AggregationRule::TrimmedMean { trim: 1 },
        AggregationRule::Hics(HicsConfig::default()),
    ]
}

fn ranking_strategy() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    prop::collection::vec(
        (
            Just((0..20usize).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::btree_set(0..20usize, 0..6),
        ),
        1..8,
    )
    .prop_map(|users| {
        let recs = users.iter().map(|(r, _)| r.clone()).collect();
        let sets = users.iter().map(|(_, s)| s.iter().copied().collect()).collect();
        (recs, sets)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn aggregation_is_order_invariant(updates in update_strategy(params().mlp.num_params()), seed in any::<u64>()) {
        let mut shuffled = updates.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        for rule in rules() {
            let (mut a, mut b) = (params(), params());
            Aggregator::new(rule, ItemDenominator::Touching).aggregate(&updates, &mut a).unwrap();
            Aggregator::new(rule, ItemDenominator::Touching).aggregate(&shuffled, &mut b).unwrap();
            prop_assert_eq!(a, b, "{}", rule.name());
        }
    }

    #[test]
    fn identical_updates_move_by_that_delta(
        delta in prop::collection::vec(-3.0..3.0f64, DIM),
        mlp in prop::collection::vec(-3.0..3.0f64, params().mlp.num_params()),
        n in 1usize..7,
    ) {
        let base = params();
        let updates: Vec<GradientUpdate> = (0..n)
            .map(|c| GradientUpdate {
                client_id: ClientId(c),
                item_deltas: BTreeMap::from([(2, delta.clone())]),
                mlp_delta: mlp.clone(),
            })
            .collect();
        for rule in [AggregationRule::FedAvg, AggregationRule::Krum, AggregationRule::Median, AggregationRule::TrimmedMean { trim: 1 }] {
            let mut p = base.clone();
            Aggregator::new(rule, ItemDenominator::Touching).aggregate(&updates, &mut p).unwrap();
            prop_assert_eq!(p.items.row(2), delta.as_slice(), "{}", rule.name());
            prop_assert_eq!(p.mlp.params(), mlp.as_slice(), "{}", rule.name());
        }
    }

    #[test]
    fn aggregated_params_stay_finite_and_reject_non_finite(updates in update_strategy(params().mlp.num_params()), bad in 0usize..7) {
        let mut updates = updates;
        let idx = bad % updates.len();
        updates[idx].mlp_delta[0] = f64::NAN;
        for rule in rules() {
            let mut p = params();
            let stats = Aggregator::new(rule, ItemDenominator::Touching).aggregate(&updates, &mut p).unwrap();
            prop_assert!(p.is_finite());
            prop_assert_eq!(stats.rejected_updates, 1);
        }
    }

    #[test]
    fn median_lies_within_the_contributions(values in prop::collection::vec(-5.0..5.0f64, 1..9)) {
        let updates: Vec<GradientUpdate> = values
            .iter()
            .enumerate()
            .map(|(c, &v)| GradientUpdate {
                client_id: ClientId(c),
                item_deltas: BTreeMap::from([(0, vec![v, -v])]),
                mlp_delta: vec![0.0; params().mlp.num_params()],
            })
            .collect();
        let mut p = params();
        Aggregator::new(AggregationRule::Median, ItemDenominator::Touching).aggregate(&updates, &mut p).unwrap();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p.items.row(0)[0] >= lo && p.items.row(0)[0] <= hi);
    }

    #[test]
    fn clipping_bounds_the_norm(v in prop::collection::vec(-10.0..10.0f64, 1..8), t in 0.01..5.0f64) {
        let mut w = v.clone();
        let clipped = clip_to_norm(&mut w, t);
        prop_assert!(norm(&w) <= t * (1.0 + 1e-12) || !clipped);
        prop_assert_eq!(clipped, norm(&v) > t);
        if !clipped {
            prop_assert_eq!(w, v);
        }
    }

    #[test]
    fn ranking_metrics_are_fractions((recs, truth) in ranking_strategy(), target in 0usize..20, k in 1usize..21) {
        if truth.iter().any(|t| !t.is_empty()) {
            let r = recall_at_k(&recs, &truth, k).unwrap();
            let n = ndcg_at_k(&recs, &truth, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        }
        if let Some(er) = exposure_ratio(&recs, &truth, &[target], k).unwrap() {
            prop_assert!((0.0..=1.0).contains(&er));
        }
    }

    #[test]
    fn cosine_is_bounded(x in prop::collection::vec(-4.0..4.0f64, 3), y in prop::collection::vec(-4.0..4.0f64, 3)) {
        prop_assume!(norm(&x) > 1e-6 && norm(&y) > 1e-6);
        let c = cosine_similarity(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn user_contrastive_is_scale_invariant(
        u in prop::collection::vec(0.1..2.0f64, 4),
        a in prop::collection::vec(0.1..2.0f64, 4),
        b in prop::collection::vec(-2.0..-0.1f64, 4),
        s in 0.1..10.0f64,
    ) {
        let synth = vec![vec![0.5, 0.5, 0.5, 0.5], vec![1.0, 0.0, 0.0, 0.0]];
        let scale = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let l1 = user_contrastive_loss(&u, &a, &b, &synth, 0.2).unwrap().loss;
        let l2 = user_contrastive_loss(&scale(&u), &scale(&a), &scale(&b), &synth, 0.2).unwrap().loss;
        prop_assert!((l1 - l2).abs() <= 1e-9 * (1.0 + l1.abs()));
    }

    #[test]
    fn item_contrastive_is_nonnegative(v in prop::collection::vec(0.05..3.0f64, 12), w in prop::collection::vec(-3.0..-0.05f64, 12)) {
        let (loss, _, _) = item_contrastive_loss(&v, &w, 3, 0.2).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn adam_second_moment_stays_nonnegative(grads in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 1..10)) {
        let mut state = AdamState::new(4, 0.01);
        let mut p = vec![0.0; 4];
        for g in &grads {
            state.step(&mut p, g).unwrap();
            prop_assert!(state.second_moment.iter().all(|&m| m >= 0.0));
        }
        prop_assert_eq!(state.step_count, grads.len() as u64);
    }

    #[test]
    fn round_plan_partitions_users(n in 0usize..60, b in 1usize..12, round in 0usize..5, seed in any::<u64>()) {
        let users: Vec<usize> = (0..n).collect();
        let plan = plan_round(&users, b, round, seed).unwrap();
        prop_assert!(plan.batches.iter().all(|x| !x.is_empty() && x.len() <= b));
        let mut all = plan.batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, users);
    }

    #[test]
    fn negatives_avoid_interactions(
        inter in prop::collection::btree_set(0usize..50, 0..20),
        positives in 1usize..6,
        ratio in 0usize..5,
        seed in any::<u64>(),
    ) {
        let inter: Vec<usize> = inter.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neg = sample_negatives(positives, &inter, 50, ratio, &mut rng);
        prop_assert_eq!(neg.len(), (ratio * positives).min(50 - inter.len()));
        prop_assert!(neg.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(neg.iter().all(|i| inter.binary_search(i).is_err()));
    }

    #[test]
    fn config_text_round_trips(epochs in 1usize..50, lr in 1e-5..1.0f64, frac in 0.0..1.0f64, trim in 1usize..4) {
        let mut cfg = ExperimentConfig::default();
        cfg.train.global_epochs = epochs;
        cfg.train.lr = lr;
        cfg.attack.fraction = frac;
        cfg.defense.trim = trim;
        let back = ExperimentConfig::parse_str(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
