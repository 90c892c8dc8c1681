use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{InteractionDataset, Split};

/// A client's local training data: train-split positives and sampled negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub owner: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl ClientDataset {
    pub fn from_dataset(ds: &InteractionDataset, user: usize) -> Self {
        Self {
            owner: user,
            positives: ds.items_in(user, Split::Train),
            negatives: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    /// Positives then negatives, deduplicated and ascending.
    pub fn touched_items(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.positives.iter().chain(&self.negatives).copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Uniform sample without replacement from the items `user` never interacted
/// with, of size `min(ratio·|positives|, available)`, ascending.
///
/// `interacted` must be sorted ascending and cover every split.
pub fn sample_negatives<R: Rng + ?Sized>(
    num_positives: usize,
    interacted: &[usize],
    num_items: usize,
    ratio: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut available = Vec::with_capacity(num_items.saturating_sub(interacted.len()));
    let mut it = interacted.iter().peekable();
    for item in 0..num_items {
        while it.peek().is_some_and(|&&x| x < item) {
            it.next();
        }
        if it.peek() != Some(&&item) {
            available.push(item);
        }
    }
    let want = ratio * num_positives;
    if available.is_empty() && want > 0 {
        log::warn!("no non-interacted items left to sample as negatives");
        return Vec::new();
    }
    let k = want.min(available.len());
    let mut picked: Vec<usize> = index::sample(rng, available.len(), k)
        .into_iter()
        .map(|i| available[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_to_four_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = [3, 9, 27, 40, 41];
        let neg = sample_negatives(pos.len(), &pos, 500, 4, &mut rng);
        assert_eq!(neg.len(), 20);
        assert!(neg.iter().all(|n| !pos.contains(n)));
        let mut dedup = neg.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 20);
    }

    #[test]
    fn exhausted_catalog_gives_no_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all: Vec<usize> = (0..6).collect();
        assert!(sample_negatives(6, &all, 6, 4, &mut rng).is_empty());
    }

    #[test]
    fn capped_by_availability() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let neg = sample_negatives(3, &[0, 1, 2], 8, 4, &mut rng);
        assert_eq!(neg, vec![3, 4, 5, 6, 7]);
    }
}
