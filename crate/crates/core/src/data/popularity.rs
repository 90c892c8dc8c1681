use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{InteractionDataset, Split};

pub const DEFAULT_HOT_COUNT: usize = 100;

/// Train-split interaction counts, sampling probabilities and the hot/normal
/// item partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
    /// Ascending item indices.
    pub hot: Vec<usize>,
    /// Ascending item indices.
    pub normal: Vec<usize>,
}

impl PopularityTable {
    pub fn from_counts(counts: Vec<u64>, hot_count: usize) -> Self {
        let n = counts.len();
        let total: u64 = counts.iter().sum();
        let probabilities = if total == 0 {
            vec![1.0 / n.max(1) as f64; n]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        let mut order: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut hot: Vec<usize> = order.into_iter().take(hot_count).collect();
        hot.sort_unstable();
        let mut is_hot = vec![false; n];
        for &h in &hot {
            is_hot[h] = true;
        }
        let normal = (0..n).filter(|&i| !is_hot[i]).collect();
        Self {
            counts,
            probabilities,
            hot,
            normal,
        }
    }

    pub fn num_items(&self) -> usize {
        self.counts.len()
    }

    pub fn is_hot(&self, item: usize) -> bool {
        self.hot.binary_search(&item).is_ok()
    }

    /// Items with zero train interactions.
    pub fn cold_items(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&i| self.counts[i] == 0).collect()
    }
}

/// Counts over the train split only.
pub fn compute_popularity(ds: &InteractionDataset, hot_count: usize) -> PopularityTable {
    let mut counts = vec![0u64; ds.num_items()];
    for r in ds.per_user.iter().flatten() {
        if r.split == Split::Train {
            counts[r.item] += 1;
        }
    }
    PopularityTable::from_counts(counts, hot_count)
}

/// `n` distinct indices drawn with probability proportional to `weights`
/// (Efraimidis–Spirakis keys). Zero-weight entries are only used once every
/// positive-weight entry is taken, and then uniformly. Returned ascending.
pub fn weighted_sample_without_replacement<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keyed.iter().take(n.min(positive)).map(|k| k.1).collect();
    if n > positive {
        let mut zeros: Vec<usize> = keyed[positive..].iter().map(|k| k.1).collect();
        zeros.sort_unstable();
        let extra = rand::seq::index::sample(rng, zeros.len(), (n - positive).min(zeros.len()));
        picked.extend(extra.into_iter().map(|i| zeros[i]));
    }
    picked.sort_unstable();
    picked
}
