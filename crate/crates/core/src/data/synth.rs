//! Seeded generator for MovieLens-shaped implicit feedback: power-law item
//! popularity, latent-factor user taste, per-user timestamps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{InteractionDataset, RawInteraction};
use crate::numeric::{dot, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Median interactions per user.
    pub median_interactions: usize,
    pub min_interactions: usize,
    /// Exponent of the Zipf-like popularity curve.
    pub popularity_exponent: f64,
    pub latent_dim: usize,
    /// Strength of taste relative to popularity.
    pub taste_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 600,
            median_interactions: 28,
            min_interactions: 12,
            popularity_exponent: 0.9,
            latent_dim: 8,
            taste_strength: 2.0,
            seed: 2024,
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Vec<RawInteraction> {
    let mut rng = rng_for(spec.seed, &[0x5e7]);
    let k = spec.latent_dim.max(1);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..k).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>()
    };
    let item_factors: Vec<Vec<f64>> = (0..spec.items).map(|_| gauss(&mut rng)).collect();
    let mut ranks: Vec<usize> = (0..spec.items).collect();
    ranks.shuffle(&mut rng);
    let log_pop: Vec<f64> = ranks
        .iter()
        .map(|&r| -spec.popularity_exponent * ((r + 1) as f64).ln())
        .collect();
    let activity = LogNormal::new((spec.median_interactions.max(1) as f64).ln(), 0.5).unwrap();
    let scale = spec.taste_strength / (k as f64).sqrt();
    let max_n = (spec.items / 2).max(spec.min_interactions);

    let mut out = Vec::new();
    for u in 0..spec.users {
        let taste = gauss(&mut rng);
        let n = (activity.sample(&mut rng).round() as usize).clamp(spec.min_interactions, max_n);
        // Gumbel-top-k draws n distinct items ∝ popularity · exp(taste affinity).
        let mut keyed: Vec<(f64, usize, f64)> = (0..spec.items)
            .map(|j| {
                let affinity = scale * dot(&taste, &item_factors[j]);
                let g: f64 = -(-rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln()).ln();
                (log_pop[j] + affinity + g, j, affinity)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut t: i64 = 978_300_000 + rng.gen_range(0..1_000_000);
        for &(_, j, affinity) in keyed.iter().take(n) {
            t += rng.gen_range(1..5_000);
            let rating = (3.0 + affinity).round().clamp(1.0, 5.0);
            out.push(RawInteraction {
                user: format!("u{u}"),
                item: format!("i{j}"),
                rating,
                timestamp: Some(t),
            });
        }
    }
    // chronological shuffle across users, like a raw log
    out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.user.cmp(&b.user)));
    out
}

pub fn generate_dataset(spec: &SyntheticSpec) -> InteractionDataset {
    InteractionDataset::from_records(generate(spec))
}
