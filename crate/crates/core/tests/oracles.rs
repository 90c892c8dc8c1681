//! Aggregation rules and ranking metrics against brute-force references on
//! random instances, plus the spectrum routine against nalgebra's SVD.

use std::collections::BTreeMap;

use fedrec_core::defense::{
    aggregate_fedavg, krum_aggregate, median_aggregate, trimmed_mean_aggregate, ItemDenominator,
};
use fedrec_core::metrics::{exposure_ratio, ndcg_at_k, recall_at_k};
use fedrec_core::model::{top_k_from_scores, PublicParams};
use fedrec_core::numeric::{singular_values, DenseMatrix, Mlp};
use fedrec_core::{ClientId, GradientUpdate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 50;
const ITEMS: usize = 8;
const DIM: usize = 3;

fn base_params(rng: &mut ChaCha8Rng) -> PublicParams {
    let mut p = PublicParams {
        items: DenseMatrix::zeros(ITEMS, DIM),
        mlp: Mlp::zeros(&[2 * DIM, 2]),
    };
    for x in p.items.as_mut_slice().iter_mut().chain(p.mlp.params_mut()) {
        *x = rng.gen_range(-1.0..1.0);
    }
    p
}

/// Six clients with random ids, each touching a random item subset.
fn random_updates(rng: &mut ChaCha8Rng, mlp_len: usize) -> Vec<GradientUpdate> {
    let mut ids: Vec<usize> = (0..40).collect();
    ids.shuffle(rng);
    ids[..6]
        .iter()
        .map(|&id| {
            let touched: Vec<usize> = (0..ITEMS).filter(|_| rng.gen_bool(0.6)).collect();
            let item_deltas = touched
                .into_iter()
                .map(|i| (i, (0..DIM).map(|_| rng.gen_range(-2.0..2.0)).collect()))
                .collect();
            GradientUpdate {
                client_id: ClientId(id),
                item_deltas,
                mlp_delta: (0..mlp_len).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            }
        })
        .collect()
}

// Brute-force reductions over one coordinate's values in client-id order.

fn ref_mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

fn ref_median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    // insertion sort, independent of the library's sort
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ref_trimmed(xs: &[f64], trim: usize) -> f64 {
    if xs.len() <= 2 * trim {
        return ref_mean(xs);
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ref_mean(&v[trim..v.len() - trim])
}

fn ref_krum(vs: &[Vec<f64>]) -> Vec<f64> {
    let n = vs.len();
    if n == 1 {
        return vs[0].clone();
    }
    let mut best: Option<(f64, usize)> = None;
    for i in 0..n {
        let mut dist = 0.0;
        for c in 0..vs[i].len() {
            let mut others = 0.0;
            for (j, w) in vs.iter().enumerate() {
                if j != i {
                    others += w[c];
                }
            }
            let diff = vs[i][c] - others / (n - 1) as f64;
            dist += diff * diff;
        }
        if best.map_or(true, |(b, _)| dist < b) {
            best = Some((dist, i));
        }
    }
    vs[best.unwrap().1].clone()
}

/// Applies `item_rule` per item over the touching clients and `mlp_rule` per
/// MLP coordinate over all clients, everything in client-id order.
fn reference(
    params: &PublicParams,
    updates: &[GradientUpdate],
    item_rule: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
    mlp_rule: &dyn Fn(&[f64]) -> f64,
) -> PublicParams {
    let mut sorted: Vec<&GradientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id.0);
    let mut out = params.clone();
    for item in 0..ITEMS {
        let contribs: Vec<Vec<f64>> = sorted.iter().filter_map(|u| u.item_deltas.get(&item).cloned()).collect();
        if contribs.is_empty() {
            continue;
        }
        let delta = item_rule(&contribs);
        for (p, d) in out.items.row_mut(item).iter_mut().zip(&delta) {
            *p += d;
        }
    }
    let len = params.mlp.num_params();
    for c in 0..len {
        let col: Vec<f64> = sorted.iter().map(|u| u.mlp_delta[c]).collect();
        out.mlp.params_mut()[c] += mlp_rule(&col);
    }
    out
}

fn per_coordinate(f: fn(&[f64]) -> f64) -> impl Fn(&[Vec<f64>]) -> Vec<f64> {
    move |vs: &[Vec<f64>]| (0..vs[0].len()).map(|c| f(&vs.iter().map(|v| v[c]).collect::<Vec<_>>())).collect()
}

fn assert_bitwise(rule: &str, seed: u64, got: &PublicParams, want: &PublicParams) {
    let bits = |p: &PublicParams| -> Vec<u64> {
        p.items.as_slice().iter().chain(p.mlp.params()).map(|x| x.to_bits()).collect()
    };
    assert_eq!(bits(got), bits(want), "{rule} differs from the reference on instance {seed}");
}

#[test]
fn fedavg_matches_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = base_params(&mut rng);
        let updates = random_updates(&mut rng, params.mlp.num_params());
        let mut got = params.clone();
        aggregate_fedavg(&updates, &mut got, ItemDenominator::Touching).unwrap();
        let want = reference(&params, &updates, &per_coordinate(ref_mean), &ref_mean);
        assert_bitwise("fedavg", seed, &got, &want);
    }
}

#[test]
fn krum_matches_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let params = base_params(&mut rng);
        let updates = random_updates(&mut rng, params.mlp.num_params());
        let mut got = params.clone();
        krum_aggregate(&updates, &mut got).unwrap();
        let want = reference(&params, &updates, &ref_krum, &ref_mean);
        assert_bitwise("krum", seed, &got, &want);
    }
}

#[test]
fn median_matches_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let params = base_params(&mut rng);
        let updates = random_updates(&mut rng, params.mlp.num_params());
        let mut got = params.clone();
        median_aggregate(&updates, &mut got).unwrap();
        let want = reference(&params, &updates, &per_coordinate(ref_median), &ref_median);
        assert_bitwise("median", seed, &got, &want);
    }
}

#[test]
fn trimmed_mean_matches_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let params = base_params(&mut rng);
        let updates = random_updates(&mut rng, params.mlp.num_params());
        let mut got = params.clone();
        trimmed_mean_aggregate(&updates, &mut got, 1).unwrap();
        let trim1 = |xs: &[f64]| ref_trimmed(xs, 1);
        let items = move |vs: &[Vec<f64>]| -> Vec<f64> {
            (0..vs[0].len()).map(|c| trim1(&vs.iter().map(|v| v[c]).collect::<Vec<_>>())).collect()
        };
        let want = reference(&params, &updates, &items, &trim1);
        assert_bitwise("trimmed_mean", seed, &got, &want);
    }
}

#[test]
fn krum_rejects_an_outlier() {
    let mut params = PublicParams {
        items: DenseMatrix::zeros(1, 2),
        mlp: Mlp::zeros(&[4, 1]),
    };
    let mlp_len = params.mlp.num_params();
    let mut updates: Vec<GradientUpdate> = (0..4)
        .map(|c| GradientUpdate {
            client_id: ClientId(c),
            item_deltas: BTreeMap::from([(0, vec![0.1, 0.1])]),
            mlp_delta: vec![0.0; mlp_len],
        })
        .collect();
    updates.push(GradientUpdate {
        client_id: ClientId(4),
        item_deltas: BTreeMap::from([(0, vec![50.0, -50.0])]),
        mlp_delta: vec![0.0; mlp_len],
    });
    krum_aggregate(&updates, &mut params).unwrap();
    assert_eq!(params.items.row(0), &[0.1, 0.1]);
}

// ---- metrics ----

struct RankingInstance {
    recs: Vec<Vec<usize>>,
    truth: Vec<Vec<usize>>,
    interacted: Vec<Vec<usize>>,
    targets: Vec<usize>,
}

fn random_ranking(rng: &mut ChaCha8Rng) -> RankingInstance {
    let items = 30;
    let users = rng.gen_range(3..12);
    let mut recs = Vec::new();
    let mut truth = Vec::new();
    let mut interacted = Vec::new();
    for _ in 0..users {
        let mut perm: Vec<usize> = (0..items).collect();
        perm.shuffle(rng);
        recs.push(perm[..20].to_vec());
        let mut t: Vec<usize> = (0..items).filter(|_| rng.gen_bool(0.15)).collect();
        if rng.gen_bool(0.1) {
            t.clear();
        }
        let mut inter: Vec<usize> = t.iter().copied().chain((0..items).filter(|_| rng.gen_bool(0.1))).collect();
        inter.sort_unstable();
        inter.dedup();
        truth.push(t);
        interacted.push(inter);
    }
    if truth.iter().all(Vec::is_empty) {
        truth[0].push(0);
    }
    let targets = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..items)).collect();
    RankingInstance {
        recs,
        truth,
        interacted,
        targets,
    }
}

fn ref_recall(inst: &RankingInstance, k: usize) -> f64 {
    let mut vals = Vec::new();
    for (r, t) in inst.recs.iter().zip(&inst.truth) {
        if t.is_empty() {
            continue;
        }
        let hits = t.iter().filter(|i| r[..k.min(r.len())].contains(i)).count();
        vals.push(hits as f64 / t.len() as f64);
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn ref_ndcg(inst: &RankingInstance, k: usize) -> f64 {
    let mut vals = Vec::new();
    for (r, t) in inst.recs.iter().zip(&inst.truth) {
        if t.is_empty() {
            continue;
        }
        let mut dcg = 0.0;
        for (pos, item) in r.iter().take(k).enumerate() {
            if t.contains(item) {
                dcg += 1.0 / (pos as f64 + 2.0).log2();
            }
        }
        let mut idcg = 0.0;
        for pos in 0..t.len().min(k) {
            idcg += 1.0 / (pos as f64 + 2.0).log2();
        }
        vals.push(dcg / idcg);
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn ref_er(inst: &RankingInstance, k: usize) -> Option<f64> {
    let mut per_target = Vec::new();
    for &t in &inst.targets {
        let eligible: Vec<usize> = (0..inst.recs.len()).filter(|&u| !inst.interacted[u].contains(&t)).collect();
        if eligible.is_empty() {
            continue;
        }
        let exposed = eligible.iter().filter(|&&u| inst.recs[u][..k].contains(&t)).count();
        per_target.push(exposed as f64 / eligible.len() as f64);
    }
    (!per_target.is_empty()).then(|| per_target.iter().sum::<f64>() / per_target.len() as f64)
}

#[test]
fn ranking_metrics_match_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let inst = random_ranking(&mut rng);
        for k in [1, 5, 20] {
            let recall = recall_at_k(&inst.recs, &inst.truth, k).unwrap();
            let ndcg = ndcg_at_k(&inst.recs, &inst.truth, k).unwrap();
            assert!((recall - ref_recall(&inst, k)).abs() <= 1e-12, "recall@{k} instance {seed}");
            assert!((ndcg - ref_ndcg(&inst, k)).abs() <= 1e-12, "ndcg@{k} instance {seed}");
            let er = exposure_ratio(&inst.recs, &inst.interacted, &inst.targets, k).unwrap();
            match (er, ref_er(&inst, k)) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "er@{k} instance {seed}"),
                (a, b) => assert_eq!(a, b, "er@{k} instance {seed}"),
            }
        }
    }
}

#[test]
fn top_k_matches_full_sort() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        // a coarse grid forces ties, broken toward the lower index
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(0..8) as f64).collect();
        let exclude: Vec<usize> = (0..40).filter(|_| rng.gen_bool(0.2)).collect();
        let k = rng.gen_range(1..45);
        let mut all: Vec<usize> = (0..40).filter(|i| !exclude.contains(i)).collect();
        all.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        all.truncate(k);
        assert_eq!(top_k_from_scores(&scores, &exclude, k), all, "instance {seed}");
    }
}

#[test]
fn metric_closed_forms() {
    let recs = vec![vec![3, 1, 7, 2]];
    let truth = vec![vec![1, 2]];
    assert_eq!(recall_at_k(&recs, &truth, 2).unwrap(), 0.5);
    let ndcg = ndcg_at_k(&recs, &truth, 4).unwrap();
    let want = (1.0 / 3f64.log2() + 1.0 / 5f64.log2()) / (1.0 + 1.0 / 3f64.log2());
    assert!((ndcg - want).abs() < 1e-15);
    // two of three eligible users see the target; the fourth interacted with it
    let recs = vec![vec![9, 0], vec![1, 9], vec![2, 3], vec![9, 4]];
    let inter = vec![vec![], vec![], vec![], vec![9]];
    assert_eq!(exposure_ratio(&recs, &inter, &[9], 2).unwrap(), Some(2.0 / 3.0));
}

#[test]
fn singular_values_match_nalgebra() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let (rows, cols) = (rng.gen_range(8..40), rng.gen_range(2..9));
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ours = singular_values(&DenseMatrix::from_vec(rows, cols, data.clone()).unwrap()).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, &data);
        let mut theirs: Vec<f64> = m.singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(ours.len(), theirs.len());
        for (a, b) in ours.iter().zip(&theirs) {
            approx::assert_relative_eq!(*a, *b, epsilon = 1e-9, max_relative = 1e-9);
        }
    }
}
