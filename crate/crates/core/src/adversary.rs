//! Targeted model-poisoning clients.
//!
//! Both attacks are reconstructions from one-sentence descriptions; they aim
//! at the exposure-ratio objective and keep the MLP frozen, uploading item
//! deltas only:
//!
//! * **A-hum** mines a "hard user" (an embedding for which the targets score
//!   lowest, i.e. behave as negatives) by gradient descent, then pushes the
//!   target embeddings up for that user.
//! * **PSMU** fabricates a random user with random interactions, fits its
//!   embedding, takes the items it currently ranks highest (the targets'
//!   alternatives) as negatives and the targets as positives, and optimizes
//!   those item embeddings.
//!
//! Malicious uploads are plain [`GradientUpdate`]s, indistinguishable in
//! schema from benign ones.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::AttackKind;
use crate::data::sample_negatives;
use crate::error::{Error, Result};
use crate::federation::{ClientId, GradientUpdate};
use crate::model::{init_user_embedding, logistic_loss_local, top_k_from_scores, LocalGrads, LocalItems, PublicParams, Sample, Scorer};
use crate::numeric::{rng_for, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Target items, ascending.
    pub targets: Vec<usize>,
    /// Fraction of the user count that is malicious.
    pub malicious_fraction: f64,
    /// First poisoned round, 0-based.
    pub start_round: usize,
    pub every_batch: bool,
    /// Interactions of the fabricated PSMU user.
    pub attacker_items: usize,
    /// Alternative items pushed down by PSMU.
    pub alternatives: usize,
    pub lr: f64,
    /// Optimization steps on the poisoned item embeddings.
    pub steps: usize,
    /// Optimization steps on the fabricated user embedding.
    pub hard_steps: usize,
    /// Multiple of the median benign item-delta norm; 0 disables.
    pub norm_cap: f64,
}

impl AttackConfig {
    /// Number of malicious clients for `num_users` benign ones: at least one
    /// whenever the fraction is positive and an attack is configured.
    pub fn num_malicious(&self, num_users: usize) -> usize {
        if self.kind == AttackKind::None || self.malicious_fraction <= 0.0 || self.targets.is_empty() {
            0
        } else {
            ((self.malicious_fraction * num_users as f64).round() as usize).max(1)
        }
    }

    pub fn validate(&self, num_items: usize) -> Result<()> {
        if let Some(&t) = self.targets.iter().find(|&&t| t >= num_items) {
            return Err(Error::config("attack.targets", format!("item {t} is outside the catalog of {num_items}")));
        }
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return Err(Error::config("attack.fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A fabricated participant. Its state persists across rounds so the
/// fabricated user embedding is warm-started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaliciousClient {
    pub id: ClientId,
    pub embedding: Vec<f64>,
    /// Fabricated interactions (PSMU), ascending.
    pub items: Vec<usize>,
}

/// Adam on the item rows `ids` with the user and tower frozen. Returns the
/// per-item delta.
fn optimize_items(
    params: &PublicParams,
    user: &[f64],
    labeled: &[(usize, f64)],
    steps: usize,
    lr: f64,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut ids: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut items = LocalItems::gather(&params.items, ids);
    let start = items.rows.clone();
    let samples: Vec<Sample> = labeled
        .iter()
        .map(|&(i, label)| Sample {
            local: items.local(i).expect("gathered"),
            label,
        })
        .collect();
    let mut adam = AdamState::new(items.rows.len(), lr);
    let mut grads = LocalGrads::zeros(params.dim(), items.len(), params.mlp.num_params());
    let mut cache = params.mlp.new_cache();
    for _ in 0..steps {
        grads.clear();
        logistic_loss_local(user, &items, &params.mlp, &samples, Some(&mut grads), &mut cache);
        adam.step(&mut items.rows, &grads.items)?;
    }
    let d = items.dim;
    Ok(items
        .ids
        .iter()
        .enumerate()
        .map(|(l, &g)| {
            let delta = (0..d).map(|c| items.rows[l * d + c] - start[l * d + c]).collect();
            (g, delta)
        })
        .collect())
}

/// Adam on a user embedding for the labeled items, everything else frozen.
pub fn fit_user(params: &PublicParams, user: &mut [f64], labeled: &[(usize, f64)], steps: usize, lr: f64) -> Result<()> {
    let mut ids: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
    ids.sort_unstable();
    ids.dedup();
    let items = LocalItems::gather(&params.items, ids);
    let samples: Vec<Sample> = labeled
        .iter()
        .map(|&(i, label)| Sample {
            local: items.local(i).expect("gathered"),
            label,
        })
        .collect();
    let mut adam = AdamState::new(user.len(), lr);
    let mut grads = LocalGrads::zeros(params.dim(), items.len(), params.mlp.num_params());
    let mut cache = params.mlp.new_cache();
    for _ in 0..steps {
        grads.clear();
        logistic_loss_local(user, &items, &params.mlp, &samples, Some(&mut grads), &mut cache);
        adam.step(user, &grads.user)?;
    }
    Ok(())
}

/// Hard-user mining: gradient descent on the user embedding treating every
/// target as a negative.
pub fn mine_hard_user(params: &PublicParams, start: &[f64], targets: &[usize], steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut u = start.to_vec();
    let labeled: Vec<(usize, f64)> = targets.iter().map(|&t| (t, 0.0)).collect();
    fit_user(params, &mut u, &labeled, steps, lr)?;
    Ok(u)
}

/// A-hum poisoned upload for one malicious client.
pub fn ahum_update(params: &PublicParams, cfg: &AttackConfig, client: &mut MaliciousClient) -> Result<GradientUpdate> {
    let hard = mine_hard_user(params, &client.embedding, &cfg.targets, cfg.hard_steps, cfg.lr)?;
    let labeled: Vec<(usize, f64)> = cfg.targets.iter().map(|&t| (t, 1.0)).collect();
    let item_deltas = optimize_items(params, &hard, &labeled, cfg.steps, cfg.lr)?;
    client.embedding = hard;
    Ok(GradientUpdate {
        client_id: client.id,
        item_deltas,
        mlp_delta: vec![0.0; params.mlp.num_params()],
    })
}

/// The `n` items the user ranks highest, excluding `skip` (ascending).
pub fn alternative_items(params: &PublicParams, user: &[f64], skip: &[usize], n: usize) -> Vec<usize> {
    let scores = Scorer::new(params).logits(user);
    top_k_from_scores(&scores, skip, n)
}

/// PSMU poisoned upload for one malicious client. `seed` drives the
/// fabricated user's negative sampling.
pub fn psmu_update(params: &PublicParams, cfg: &AttackConfig, client: &mut MaliciousClient, seed: u64) -> Result<GradientUpdate> {
    let mut rng = rng_for(seed, &[0x95e0, client.id.0 as u64]);
    let negatives = sample_negatives(client.items.len(), &client.items, params.num_items(), 4, &mut rng);
    let labeled: Vec<(usize, f64)> = client
        .items
        .iter()
        .map(|&i| (i, 1.0))
        .chain(negatives.iter().map(|&i| (i, 0.0)))
        .collect();
    fit_user(params, &mut client.embedding, &labeled, cfg.hard_steps, cfg.lr)?;

    let mut skip: Vec<usize> = cfg.targets.clone();
    skip.sort_unstable();
    let alternatives = alternative_items(params, &client.embedding, &skip, cfg.alternatives);
    let labeled: Vec<(usize, f64)> = cfg
        .targets
        .iter()
        .map(|&t| (t, 1.0))
        .chain(alternatives.iter().map(|&a| (a, 0.0)))
        .collect();
    let item_deltas = optimize_items(params, &client.embedding, &labeled, cfg.steps, cfg.lr)?;
    Ok(GradientUpdate {
        client_id: client.id,
        item_deltas,
        mlp_delta: vec![0.0; params.mlp.num_params()],
    })
}

/// The set of malicious clients taking part in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adversary {
    pub cfg: AttackConfig,
    pub clients: Vec<MaliciousClient>,
    seed: u64,
}

impl Adversary {
    /// Malicious ids start at `num_users`.
    pub fn new(cfg: AttackConfig, num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<Self> {
        cfg.validate(num_items)?;
        let n = cfg.num_malicious(num_users);
        let clients = (0..n)
            .map(|m| {
                let mut rng = rng_for(seed, &[0xadd, m as u64]);
                let pool: Vec<usize> = (0..num_items).filter(|i| cfg.targets.binary_search(i).is_err()).collect();
                let k = cfg.attacker_items.min(pool.len());
                let mut items: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
                items.sort_unstable();
                MaliciousClient {
                    id: ClientId(num_users + m),
                    embedding: init_user_embedding(dim, &mut rng),
                    items,
                }
            })
            .collect();
        Ok(Self { cfg, clients, seed })
    }

    pub fn is_active(&self, round: usize) -> bool {
        !self.clients.is_empty() && round >= self.cfg.start_round
    }

    /// Whether malicious client `m` joins batch `batch` of `num_batches`.
    pub fn joins(&self, m: usize, round: usize, batch: usize, num_batches: usize) -> bool {
        if self.cfg.every_batch {
            return true;
        }
        let mut rng = rng_for(self.seed, &[0xba7c, round as u64, m as u64]);
        rand::Rng::gen_range(&mut rng, 0..num_batches.max(1)) == batch
    }

    /// Poisoned uploads for one batch, ascending by client id.
    pub fn updates(&mut self, params: &PublicParams, round: usize, batch: usize, num_batches: usize) -> Result<Vec<GradientUpdate>> {
        if !self.is_active(round) {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for m in 0..self.clients.len() {
            if !self.joins(m, round, batch, num_batches) {
                continue;
            }
            let seed = crate::numeric::derive_seed(self.seed, &[round as u64, batch as u64]);
            let cfg = &self.cfg;
            let client = &mut self.clients[m];
            let u = match cfg.kind {
                AttackKind::Ahum => ahum_update(params, cfg, client)?,
                AttackKind::Psmu => psmu_update(params, cfg, client, seed)?,
                AttackKind::None => continue,
            };
            out.push(u);
        }
        Ok(out)
    }
}

/// Scales each poisoned item delta down to at most `cap × median` of the
/// benign item-delta norms. Returns how many deltas were scaled.
pub fn cap_poisoned_norms(poisoned: &mut [GradientUpdate], benign: &[GradientUpdate], cap: f64) -> usize {
    if cap <= 0.0 {
        return 0;
    }
    let mut norms: Vec<f64> = benign
        .iter()
        .flat_map(|u| u.item_deltas.values().map(|v| crate::numeric::norm(v)))
        .collect();
    if norms.is_empty() {
        return 0;
    }
    norms.sort_by(f64::total_cmp);
    let limit = cap * norms[norms.len() / 2];
    let mut n = 0;
    for u in poisoned {
        for v in u.item_deltas.values_mut() {
            if crate::defense::clip_to_norm(v, limit) {
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (PublicParams, AttackConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = PublicParams::init(50, 8, &[16, 8], &mut rng);
        let cfg = AttackConfig {
            kind: AttackKind::Ahum,
            targets: vec![7],
            malicious_fraction: 0.01,
            start_round: 0,
            every_batch: true,
            attacker_items: 10,
            alternatives: 5,
            lr: 0.01,
            steps: 10,
            hard_steps: 10,
            norm_cap: 0.0,
        };
        (params, cfg)
    }

    #[test]
    fn malicious_count_has_floor_of_one() {
        let (_, mut cfg) = setup();
        assert_eq!(cfg.num_malicious(200), 2);
        cfg.malicious_fraction = 0.001;
        assert_eq!(cfg.num_malicious(200), 1);
        cfg.malicious_fraction = 0.0;
        assert_eq!(cfg.num_malicious(200), 0);
    }

    #[test]
    fn ahum_touches_only_targets() {
        let (params, cfg) = setup();
        let mut adv = Adversary::new(cfg, 100, 50, 8, 1).unwrap();
        let ups = adv.updates(&params, 0, 0, 1).unwrap();
        assert_eq!(ups.len(), 1);
        assert_eq!(ups[0].item_deltas.keys().copied().collect::<Vec<_>>(), vec![7]);
        assert!(ups[0].mlp_delta.iter().all(|&x| x == 0.0));
        assert_eq!(ups[0].client_id, ClientId(100));
    }

    #[test]
    fn psmu_touches_targets_and_alternatives() {
        let (params, mut cfg) = setup();
        cfg.kind = AttackKind::Psmu;
        let mut adv = Adversary::new(cfg, 100, 50, 8, 1).unwrap();
        let ups = adv.updates(&params, 0, 0, 1).unwrap();
        let keys: Vec<usize> = ups[0].item_deltas.keys().copied().collect();
        assert_eq!(keys.len(), 6);
        assert!(keys.contains(&7));
    }

    #[test]
    fn inactive_before_start() {
        let (params, mut cfg) = setup();
        cfg.start_round = 3;
        let mut adv = Adversary::new(cfg, 100, 50, 8, 1).unwrap();
        assert!(adv.updates(&params, 2, 0, 1).unwrap().is_empty());
    }
}
