use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{plan_round, resample_client_negatives, run_round, FederationSettings, ServerState, UploadEvent};
use crate::adversary::{Adversary, AttackConfig};
use crate::config::{AttackKind, ExperimentConfig};
use crate::contrastive::{build_synthetic_pool, PoolConfig, RegularizerConfig, SyntheticUserPool};
use crate::data::{
    compute_popularity, load_dataset, synth, ClientDataset, InteractionDataset, PopularityTable, Split, SplitConfig,
    SplitManifest,
};
use crate::defense::Aggregator;
use crate::error::{Error, Result};
use crate::metrics::{exposure_ratio, ndcg_at_k, rank_users, recall_at_k, EvalUser, MetricsReport};
use crate::model::{init_user_embedding, ClientState, LocalTrainConfig, PublicParams};
use crate::numeric::{derive_seed, rng_for};

/// ER is always reported at this cutoff.
pub const ER_K: usize = 5;

/// Dataset after ingestion, subsampling and splitting, shared by all runs
/// of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub dataset: InteractionDataset,
    pub split: SplitManifest,
    pub popularity: PopularityTable,
    /// Per user, every interacted item over all splits, ascending.
    pub interacted: Vec<Vec<usize>>,
    /// Per user, train and validation items, ascending.
    pub exclude: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let raw = match &cfg.dataset.path {
        Some(p) => load_dataset(p, cfg.dataset.format)?,
        None => synth::generate_dataset(&synth::SyntheticSpec {
            users: cfg.synth.users,
            items: cfg.synth.items,
            median_interactions: cfg.synth.median_interactions,
            seed: cfg.dataset.seed,
            ..Default::default()
        }),
    };
    let mut ds = raw.to_implicit();
    if cfg.dataset.users > 0 && cfg.dataset.users < ds.num_users() {
        ds = ds.subsample_top_users(cfg.dataset.users);
    }
    let (ds, split) = ds.split(&SplitConfig {
        test_fraction: cfg.dataset.test_fraction,
        valid_fraction: cfg.dataset.valid_fraction,
        mode: cfg.dataset.split,
        seed: cfg.dataset.seed,
    })?;
    let popularity = compute_popularity(&ds, cfg.dataset.hot_count);
    let n = ds.num_users();
    let interacted = (0..n).map(|u| ds.all_items(u)).collect();
    let exclude = (0..n)
        .map(|u| {
            let mut v = ds.items_in(u, Split::Train);
            v.extend(ds.items_in(u, Split::Valid));
            v.sort_unstable();
            v
        })
        .collect();
    let test = (0..n).map(|u| ds.items_in(u, Split::Test)).collect();
    Ok(PreparedData {
        dataset: ds,
        split,
        popularity,
        interacted,
        exclude,
        test,
    })
}

/// One seeded cold target (zero train interactions). When no item is cold
/// the least popular items are the candidates.
pub fn select_targets(popularity: &PopularityTable, seed: u64) -> Vec<usize> {
    let Some(&min) = popularity.counts.iter().min() else {
        return Vec::new();
    };
    let candidates: Vec<usize> = (0..popularity.num_items()).filter(|&i| popularity.counts[i] == min).collect();
    let mut rng = rng_for(seed, &[0x7a6e7]);
    vec![candidates[rand::Rng::gen_range(&mut rng, 0..candidates.len())]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackTraceRow {
    pub round: usize,
    pub er: Option<f64>,
    pub target_mean_rank: Option<f64>,
    pub poisoned_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseTraceRow {
    pub round: usize,
    pub rule: String,
    pub updates: usize,
    pub rejected: usize,
    pub dropped: usize,
    pub clipped: usize,
    pub threshold: f64,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub seed: u64,
    pub params: PublicParams,
    pub reports: Vec<MetricsReport>,
    pub attack_trace: Vec<AttackTraceRow>,
    pub defense_trace: Vec<DefenseTraceRow>,
    pub targets: Vec<usize>,
    pub round_seconds: Vec<f64>,
}

impl TrainingRun {
    pub fn final_report(&self) -> MetricsReport {
        self.reports.last().copied().unwrap_or_default()
    }
}

fn eval_users(data: &PreparedData, clients: &[ClientState]) -> Vec<EvalUser> {
    clients
        .iter()
        .enumerate()
        .map(|(u, c)| EvalUser {
            embedding: c.user_embedding.clone(),
            exclude: data.exclude[u].clone(),
            test: data.test[u].clone(),
            interacted: data.interacted[u].clone(),
        })
        .collect()
}

/// Runs `T` global rounds for one seed and evaluates after each.
///
/// `observer` sees every upload (benign and malicious) before aggregation.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    observer: &mut dyn FnMut(&UploadEvent<'_>),
) -> Result<TrainingRun> {
    cfg.validate()?;
    let ds = &data.dataset;
    let (num_users, num_items, dim) = (ds.num_users(), ds.num_items(), cfg.train.dim);
    if num_users == 0 || num_items == 0 {
        return Err(Error::Empty("dataset has no users or items".into()));
    }
    let params = PublicParams::init(num_items, dim, &cfg.train.hidden, &mut rng_for(seed, &[0x1417]));
    let mut clients: Vec<ClientState> = (0..num_users)
        .map(|u| {
            let emb = init_user_embedding(dim, &mut rng_for(seed, &[0x05e4, u as u64]));
            ClientState::new(emb, ClientDataset::from_dataset(ds, u), cfg.train.lr)
        })
        .collect();

    let contrastive = cfg.contrastive.enabled.then_some(cfg.contrastive.cfg);
    let pool = if contrastive.is_some() && cfg.contrastive.pool_size > 0 {
        build_synthetic_pool(
            &data.popularity,
            &PoolConfig {
                pool_size: cfg.contrastive.pool_size,
                items_per_user: cfg.contrastive.synthetic_items,
                sampling: cfg.contrastive.synthetic_sampling,
                negative_ratio: cfg.dataset.negative_ratio,
                lr: cfg.train.lr,
            },
            dim,
            derive_seed(seed, &[0x9001]),
        )?
    } else {
        SyntheticUserPool::empty()
    };
    let regularizer = cfg.regularizer.enabled.then(|| RegularizerConfig {
        hot: data.popularity.hot.clone(),
        normal: data.popularity.normal.clone(),
        sample_size: cfg.regularizer.sample_size,
        tau: cfg.regularizer.tau,
        lr: cfg.regularizer.lr,
        steps: cfg.regularizer.steps,
    });
    let rule = cfg.aggregation_rule()?;
    let mut server = ServerState {
        params,
        pool,
        aggregator: Aggregator::new(rule, cfg.train.denominator),
        settings: FederationSettings {
            local: LocalTrainConfig {
                epochs: cfg.train.local_epochs,
                lr: cfg.train.lr,
            },
            contrastive,
            uniformity_alpha: cfg.poc_alpha,
            negative_ratio: cfg.dataset.negative_ratio,
            resample_negatives: cfg.dataset.resample_negatives,
            synthetic_steps: cfg.contrastive.synthetic_steps,
            regularizer,
        },
        round: 0,
        seed,
    };

    let mut targets = if cfg.attack.targets.is_empty() {
        select_targets(&data.popularity, seed)
    } else {
        cfg.attack.targets.clone()
    };
    targets.sort_unstable();
    targets.dedup();
    let mut adversary = if cfg.attack.kind != AttackKind::None {
        Some(Adversary::new(
            AttackConfig {
                kind: cfg.attack.kind,
                targets: targets.clone(),
                malicious_fraction: cfg.attack.fraction,
                start_round: cfg.attack_start(),
                every_batch: cfg.attack.every_batch,
                attacker_items: cfg.attack.attacker_items,
                alternatives: cfg.attack.alternatives,
                lr: cfg.attack.lr,
                steps: cfg.attack.steps,
                hard_steps: cfg.attack.hard_steps,
                norm_cap: cfg.attack.norm_cap,
            },
            num_users,
            num_items,
            dim,
            derive_seed(seed, &[0xadd5]),
        )?)
    } else {
        None
    };

    let users: Vec<usize> = (0..num_users).collect();
    let k = cfg.train.top_k;
    let mut run = TrainingRun {
        seed,
        params: server.params.clone(),
        reports: Vec::with_capacity(cfg.train.global_epochs),
        attack_trace: Vec::new(),
        defense_trace: Vec::new(),
        targets: targets.clone(),
        round_seconds: Vec::new(),
    };
    for t in 0..cfg.train.global_epochs {
        let started = Instant::now();
        if t == 0 || cfg.dataset.resample_negatives {
            let key = if cfg.dataset.resample_negatives { t } else { 0 };
            resample_client_negatives(
                &mut clients,
                &data.interacted,
                num_items,
                cfg.dataset.negative_ratio,
                key,
                seed,
            );
        }
        let plan = plan_round(&users, cfg.train.batch_size, t, seed)?;
        let round = run_round(&mut server, &mut clients, &plan, adversary.as_mut(), observer)?;

        let eval = eval_users(data, &clients);
        let rankings = rank_users(&server.params, &eval, k.max(ER_K), &targets);
        let truth: Vec<Vec<usize>> = eval.iter().map(|u| u.test.clone()).collect();
        let interacted: Vec<Vec<usize>> = eval.iter().map(|u| u.interacted.clone()).collect();
        let er = exposure_ratio(&rankings.top, &interacted, &targets, ER_K)?;
        let report = MetricsReport {
            epoch: t + 1,
            recall: recall_at_k(&rankings.top, &truth, k)?,
            ndcg: ndcg_at_k(&rankings.top, &truth, k)?,
            er,
            rec_loss: round.losses.rec,
            uc_loss: round.losses.user_contrastive,
            ic_loss: round.losses.item_contrastive,
            reg_loss: round.reg_loss,
        };
        report.validate()?;
        log::info!(
            "seed {seed} epoch {}: recall@{k} {:.5} ndcg@{k} {:.5} er@5 {:?} loss {:.4}",
            t + 1,
            report.recall,
            report.ndcg,
            report.er,
            report.rec_loss
        );
        run.reports.push(report);
        run.attack_trace.push(AttackTraceRow {
            round: t + 1,
            er,
            target_mean_rank: rankings.target_mean_rank,
            poisoned_norm: round.poisoned_norm,
        });
        run.defense_trace.push(DefenseTraceRow {
            round: t + 1,
            rule: rule.name().to_owned(),
            updates: round.defense.updates,
            rejected: round.defense.rejected_updates,
            dropped: round.defense.dropped_contributions,
            clipped: round.defense.clipped_contributions,
            threshold: round.defense.threshold,
        });
        run.round_seconds.push(started.elapsed().as_secs_f64());
    }
    run.params = server.params;
    Ok(run)
}
