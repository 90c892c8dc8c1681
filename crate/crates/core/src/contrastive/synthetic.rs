//! Server-held synthetic users that act as shared negative samples.

use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, weighted_sample_without_replacement, ClientDataset, PopularityTable};
use crate::error::{Error, Result};
use crate::model::{init_user_embedding, rec_loss_local, samples_for, LocalGrads, LocalItems, PublicParams};
use crate::numeric::{normalized, rng_for, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticSampling {
    /// Items drawn proportionally to train popularity.
    Popularity,
    /// Items drawn uniformly (ablation).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub embedding: Vec<f64>,
    /// `N` interacted items as positives plus 1:`ratio` uniform negatives.
    pub dataset: ClientDataset,
    adam: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUserPool {
    pub users: Vec<SyntheticUser>,
    pub items_per_user: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub pool_size: usize,
    /// Interacted items per synthetic user (`N`).
    pub items_per_user: usize,
    pub sampling: SyntheticSampling,
    pub negative_ratio: usize,
    pub lr: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            pool_size: 60,
            items_per_user: 30,
            sampling: SyntheticSampling::Popularity,
            negative_ratio: 4,
            lr: 0.001,
        }
    }
}

pub fn build_synthetic_pool(
    popularity: &PopularityTable,
    cfg: &PoolConfig,
    dim: usize,
    seed: u64,
) -> Result<SyntheticUserPool> {
    let num_items = popularity.num_items();
    if cfg.items_per_user > num_items {
        return Err(Error::config(
            "contrastive.synthetic_items",
            format!("N = {} exceeds the catalog size {num_items}", cfg.items_per_user),
        ));
    }
    let uniform = vec![1.0; num_items];
    let weights = match cfg.sampling {
        SyntheticSampling::Popularity => &popularity.probabilities,
        SyntheticSampling::Uniform => &uniform,
    };
    let users = (0..cfg.pool_size)
        .map(|i| {
            let mut rng = rng_for(seed, &[0x5717, i as u64]);
            let positives = weighted_sample_without_replacement(weights, cfg.items_per_user, &mut rng);
            let negatives = sample_negatives(positives.len(), &positives, num_items, cfg.negative_ratio, &mut rng);
            SyntheticUser {
                embedding: init_user_embedding(dim, &mut rng),
                dataset: ClientDataset {
                    owner: i,
                    positives,
                    negatives,
                },
                adam: AdamState::new(dim, cfg.lr),
            }
        })
        .collect();
    Ok(SyntheticUserPool {
        users,
        items_per_user: cfg.items_per_user,
    })
}

impl SyntheticUserPool {
    pub fn empty() -> Self {
        Self {
            users: Vec::new(),
            items_per_user: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Unit-normalized embeddings, as consumed by the user contrastive loss.
    pub fn unit_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        self.users.iter().map(|u| normalized(&u.embedding).map(|(v, _)| v)).collect()
    }

    /// Recommendation loss of each synthetic user under `params`.
    pub fn losses(&self, params: &PublicParams) -> Vec<f64> {
        let mut cache = params.mlp.new_cache();
        self.users
            .iter()
            .map(|u| {
                let items = LocalItems::gather(&params.items, u.dataset.touched_items());
                let samples = samples_for(&u.dataset, &items);
                rec_loss_local(&u.embedding, &items, &params.mlp, &samples, None, &mut cache)
            })
            .collect()
    }
}

/// Runs `steps` Adam steps of the recommendation loss on each synthetic
/// user's embedding with `params` frozen. Returns the summed pool loss
/// before each step and after the last one.
pub fn refresh_synthetic_embeddings(pool: &mut SyntheticUserPool, params: &PublicParams, steps: usize) -> Result<Vec<f64>> {
    let d = params.dim();
    let mut trace = vec![0.0; steps + 1];
    let mut cache = params.mlp.new_cache();
    for user in &mut pool.users {
        let items = LocalItems::gather(&params.items, user.dataset.touched_items());
        let samples = samples_for(&user.dataset, &items);
        let mut grads = LocalGrads::zeros(d, items.len(), params.mlp.num_params());
        for t in trace.iter_mut().take(steps) {
            grads.clear();
            *t += rec_loss_local(&user.embedding, &items, &params.mlp, &samples, Some(&mut grads), &mut cache);
            user.adam.step(&mut user.embedding, &grads.user)?;
        }
        trace[steps] += rec_loss_local(&user.embedding, &items, &params.mlp, &samples, None, &mut cache);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize) -> PopularityTable {
        PopularityTable::from_counts((0..n as u64).map(|i| 1 + i % 7).collect(), 10)
    }

    #[test]
    fn pool_shape_matches_config() {
        let pool = build_synthetic_pool(&table(200), &PoolConfig::default(), 8, 1).unwrap();
        assert_eq!(pool.len(), 60);
        for u in &pool.users {
            assert_eq!(u.dataset.positives.len(), 30);
            assert_eq!(u.dataset.negatives.len(), 120);
            assert!(u.dataset.negatives.iter().all(|n| !u.dataset.positives.contains(n)));
        }
    }

    #[test]
    fn oversized_n_is_config_error() {
        let cfg = PoolConfig {
            items_per_user: 50,
            ..Default::default()
        };
        assert!(matches!(build_synthetic_pool(&table(20), &cfg, 8, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_steps_and_frozen_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = PublicParams::init(60, 8, &[8, 4], &mut rng);
        let mut pool = build_synthetic_pool(&table(60), &PoolConfig::default(), 8, 3).unwrap();
        let before = pool.clone();
        refresh_synthetic_embeddings(&mut pool, &params, 0).unwrap();
        assert_eq!(pool, before);
        let sum = params.checksum();
        refresh_synthetic_embeddings(&mut pool, &params, 5).unwrap();
        assert_eq!(params.checksum(), sum);
        assert_ne!(pool, before);
    }
}
