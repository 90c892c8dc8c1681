//! Synchronous federated training: round planning, client dispatch,
//! aggregation and the server's end-of-round maintenance.
//!
//! Each global round shuffles every user into batches of at most `B`. All
//! clients of a batch train against the same snapshot; the batch's uploads
//! (plus any malicious ones) are then aggregated in client-id order. After
//! the last batch the server optionally calibrates item embeddings with the
//! popularity regularizer and refreshes the synthetic users.

mod training;
mod update;

pub use training::{prepare_data, run_training, select_targets, AttackTraceRow, DefenseTraceRow, PreparedData, TrainingRun};
pub use update::{ClientId, GradientUpdate};

pub use crate::defense::{aggregate_fedavg, ItemDenominator};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::{cap_poisoned_norms, Adversary};
use crate::contrastive::{
    popularity_regularizer_step, refresh_synthetic_embeddings, ClientObjective, ContrastiveConfig, RegularizerConfig,
    SyntheticUserPool,
};
use crate::data::sample_negatives;
use crate::defense::{AggregationStats, Aggregator};
use crate::error::{Error, Result};
use crate::model::{local_train, AuxiliaryLoss, ClientState, LocalTrainConfig, LossBreakdown, NoAuxiliary, PublicParams};
use crate::numeric::{derive_seed, rng_for};

/// Batching of one global round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub batches: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Seeded shuffle of `users` cut into consecutive batches of `batch_size`.
pub fn plan_round(users: &[usize], batch_size: usize, round: usize, seed: u64) -> Result<RoundPlan> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be >= 1"));
    }
    let mut order = users.to_vec();
    order.shuffle(&mut rng_for(seed, &[0x91a, round as u64]));
    Ok(RoundPlan {
        round,
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        seed,
    })
}

/// Client-side and server-side training options that stay fixed for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSettings {
    pub local: LocalTrainConfig,
    /// `None` trains on the plain recommendation loss.
    pub contrastive: Option<ContrastiveConfig>,
    /// Uniformity penalty strength for the proof-of-concept objective.
    pub uniformity_alpha: f64,
    pub negative_ratio: usize,
    pub resample_negatives: bool,
    pub synthetic_steps: usize,
    pub regularizer: Option<RegularizerConfig>,
}

/// Server-side state mutated only between batches.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: PublicParams,
    pub pool: SyntheticUserPool,
    pub aggregator: Aggregator,
    pub settings: FederationSettings,
    pub round: usize,
    pub seed: u64,
}

/// Who produced an upload, as seen by an instrumentation observer.
#[derive(Debug, Clone, Copy)]
pub enum UploadSource<'a> {
    Benign { user_embedding: &'a [f64] },
    Malicious,
}

#[derive(Debug, Clone, Copy)]
pub struct UploadEvent<'a> {
    pub round: usize,
    pub batch: usize,
    pub update: &'a GradientUpdate,
    pub source: UploadSource<'a>,
}

/// Aggregated bookkeeping for one round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Mean first-epoch losses over the clients that trained.
    pub losses: LossBreakdown,
    pub reg_loss: f64,
    pub defense: AggregationStats,
    pub poisoned_uploads: usize,
    /// Mean L2 norm of the poisoned uploads.
    pub poisoned_norm: f64,
    pub failed_clients: usize,
}

/// Re-draws every client's negatives for `round`. With resampling off the
/// draw is keyed to round 0 so it never changes.
pub fn resample_client_negatives(
    clients: &mut [ClientState],
    interacted: &[Vec<usize>],
    num_items: usize,
    ratio: usize,
    round: usize,
    seed: u64,
) {
    for (c, inter) in clients.iter_mut().zip(interacted) {
        let mut rng = rng_for(seed, &[0x4e9, round as u64, c.dataset.owner as u64]);
        c.dataset.negatives = sample_negatives(c.dataset.positives.len(), inter, num_items, ratio, &mut rng);
    }
}

/// Runs one global round over `plan`. `clients[i]` must own user `i`.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    plan: &RoundPlan,
    mut adversary: Option<&mut Adversary>,
    observer: &mut dyn FnMut(&UploadEvent<'_>),
) -> Result<RoundReport> {
    let mut report = RoundReport {
        round: plan.round,
        ..Default::default()
    };
    let unit = server.pool.unit_embeddings()?;
    let mut trained = 0usize;
    let mut poisoned_norm_sum = 0.0;
    let num_batches = plan.batches.len();
    for (b, batch) in plan.batches.iter().enumerate() {
        let mut updates = Vec::with_capacity(batch.len() + 1);
        for &u in batch {
            let len = clients.len();
            let client = clients.get_mut(u).ok_or(Error::IndexOutOfRange { index: u, len })?;
            let seed = derive_seed(server.seed, &[0xc11e, plan.round as u64, u as u64]);
            let contrastive = server.settings.contrastive.as_ref();
            let mut objective;
            let mut plain = NoAuxiliary;
            let aux: &mut dyn AuxiliaryLoss = if contrastive.is_some() || server.settings.uniformity_alpha > 0.0 {
                objective = ClientObjective::new(contrastive, &unit, server.settings.uniformity_alpha, seed);
                &mut objective
            } else {
                &mut plain
            };
            match local_train(client, &server.params, &server.settings.local, aux) {
                Ok(out) => {
                    observer(&UploadEvent {
                        round: plan.round,
                        batch: b,
                        update: &out.update,
                        source: UploadSource::Benign {
                            user_embedding: &client.user_embedding,
                        },
                    });
                    let l = out.losses;
                    report.losses.rec += l.rec;
                    report.losses.user_contrastive += l.user_contrastive;
                    report.losses.item_contrastive += l.item_contrastive;
                    report.losses.uniformity += l.uniformity;
                    trained += 1;
                    updates.push(out.update);
                }
                Err(e) => {
                    log::warn!("client {u} failed in round {}: {e}", plan.round);
                    report.failed_clients += 1;
                }
            }
        }
        if let Some(adv) = adversary.as_deref_mut() {
            let mut poisoned = adv.updates(&server.params, plan.round, b, num_batches)?;
            cap_poisoned_norms(&mut poisoned, &updates, adv.cfg.norm_cap);
            for p in &poisoned {
                observer(&UploadEvent {
                    round: plan.round,
                    batch: b,
                    update: p,
                    source: UploadSource::Malicious,
                });
                poisoned_norm_sum += p.norm();
                report.poisoned_uploads += 1;
            }
            updates.extend(poisoned);
        }
        if updates.is_empty() {
            continue;
        }
        let stats = server.aggregator.aggregate(&updates, &mut server.params)?;
        report.defense.merge(&stats);
        if !server.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after batch {b} of round {}", plan.round)));
        }
    }
    if trained > 0 {
        let n = trained as f64;
        report.losses.rec /= n;
        report.losses.user_contrastive /= n;
        report.losses.item_contrastive /= n;
        report.losses.uniformity /= n;
    }
    if report.poisoned_uploads > 0 {
        report.poisoned_norm = poisoned_norm_sum / report.poisoned_uploads as f64;
    }
    if let Some(reg) = &server.settings.regularizer {
        let seed = derive_seed(server.seed, &[0x4e6, plan.round as u64]);
        report.reg_loss = popularity_regularizer_step(&mut server.params, reg, seed)?.loss;
    }
    if !server.pool.is_empty() && server.settings.synthetic_steps > 0 {
        refresh_synthetic_embeddings(&mut server.pool, &server.params, server.settings.synthetic_steps)?;
    }
    server.round = plan.round + 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_four_four_two() {
        let users: Vec<usize> = (0..10).collect();
        let plan = plan_round(&users, 4, 0, 9).unwrap();
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = plan.batches.concat();
        all.sort_unstable();
        assert_eq!(all, users);
    }

    #[test]
    fn same_seed_same_plan() {
        let users: Vec<usize> = (0..37).collect();
        assert_eq!(plan_round(&users, 5, 2, 1).unwrap(), plan_round(&users, 5, 2, 1).unwrap());
        assert_ne!(plan_round(&users, 5, 2, 1).unwrap(), plan_round(&users, 5, 3, 1).unwrap());
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(plan_round(&[1, 2], 0, 0, 0).is_err());
    }
}
