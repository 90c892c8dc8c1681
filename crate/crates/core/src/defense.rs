//! Server-side aggregation rules: FedAvg and the robust alternatives
//! (per-item Krum, coordinate median, trimmed mean, HiCS clipping with
//! sparsification).
//!
//! Item deltas are aggregated per item over the clients that uploaded that
//! item. Updates are reduced in client-id order, so every rule is invariant
//! to the order of the input list as long as client ids are distinct.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{ClientId, GradientUpdate};
use crate::model::PublicParams;
use crate::numeric::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemDenominator {
    /// Number of clients that uploaded the item.
    Touching,
    /// Number of updates in the batch.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClipPolicy {
    Fixed(f64),
    /// `multiplier ×` median item-delta norm over the last `window` batches.
    AdaptiveMedian { multiplier: f64, window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HicsConfig {
    pub clip: ClipPolicy,
    /// Fraction of each client's item deltas kept, by norm.
    pub sparsity: f64,
}

impl Default for HicsConfig {
    fn default() -> Self {
        Self {
            clip: ClipPolicy::AdaptiveMedian {
                multiplier: 1.0,
                window: 20,
            },
            sparsity: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AggregationRule {
    FedAvg,
    Krum,
    Median,
    TrimmedMean { trim: usize },
    Hics(HicsConfig),
}

impl AggregationRule {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::Krum => "krum",
            Self::Median => "median",
            Self::TrimmedMean { .. } => "trimmed_mean",
            Self::Hics(_) => "hics",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Hics(cfg) = self {
            if !(cfg.sparsity > 0.0 && cfg.sparsity <= 1.0) {
                return Err(Error::config("defense.hics.sparsity", "must lie in (0, 1]"));
            }
            match cfg.clip {
                ClipPolicy::Fixed(t) if !(t > 0.0) => {
                    return Err(Error::config("defense.hics.threshold", "must be > 0"));
                }
                ClipPolicy::AdaptiveMedian { multiplier, window } if !(multiplier > 0.0) || window == 0 => {
                    return Err(Error::config("defense.hics.multiplier", "must be > 0 with a nonzero window"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-aggregation bookkeeping for the defense trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationStats {
    pub updates: usize,
    pub rejected_updates: usize,
    /// (client, item) contributions dropped by the rule.
    pub dropped_contributions: usize,
    pub clipped_contributions: usize,
    pub threshold: f64,
}

impl AggregationStats {
    pub fn merge(&mut self, other: &Self) {
        self.updates += other.updates;
        self.rejected_updates += other.rejected_updates;
        self.dropped_contributions += other.dropped_contributions;
        self.clipped_contributions += other.clipped_contributions;
        self.threshold = other.threshold;
    }
}

/// Rolling norm history used by the adaptive HiCS threshold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HicsHistory {
    medians: Vec<f64>,
}

/// Σx/n accumulated in input order; returns the common value verbatim when
/// all inputs agree, so identical uploads move params by exactly that delta.
fn mean_of(values: &[f64]) -> f64 {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn stable_mean<'a>(values: impl Iterator<Item = &'a [f64]>, len: usize) -> Vec<f64> {
    let vs: Vec<&[f64]> = values.collect();
    if vs.is_empty() {
        return vec![0.0; len];
    }
    coordinatewise(&vs, len, |col| mean_of(col))
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        if a == b {
            a
        } else {
            (a + b) / 2.0
        }
    }
}

fn trimmed_mean_of(values: &mut [f64], trim: usize, warned: &mut bool) -> f64 {
    let n = values.len();
    if n <= 2 * trim {
        if !*warned {
            log::warn!("trimmed mean: {n} contributors for trim {trim}; using the plain mean");
            *warned = true;
        }
        return mean_of(values);
    }
    values.sort_by(f64::total_cmp);
    mean_of(&values[trim..n - trim])
}

fn coordinatewise(vectors: &[&[f64]], len: usize, mut f: impl FnMut(&mut [f64]) -> f64) -> Vec<f64> {
    let mut col = Vec::with_capacity(vectors.len());
    (0..len)
        .map(|c| {
            col.clear();
            col.extend(vectors.iter().map(|v| v[c]));
            f(&mut col)
        })
        .collect()
}

/// Per-item Krum: the contribution closest (L2) to the mean of the others.
/// Ties go to the earlier contribution.
pub fn krum_select(contribs: &[(ClientId, &[f64])]) -> usize {
    let n = contribs.len();
    if n == 1 {
        return 0;
    }
    let d = contribs[0].1.len();
    let mut others = vec![0.0; d];
    let mut best = (f64::INFINITY, 0usize);
    for (i, (_, v)) in contribs.iter().enumerate() {
        others.iter_mut().for_each(|o| *o = 0.0);
        for (_, w) in contribs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, c)| c) {
            for (o, x) in others.iter_mut().zip(w.iter()) {
                *o += x;
            }
        }
        let dist: f64 = v
            .iter()
            .zip(&others)
            .map(|(x, o)| {
                let diff = x - o / (n - 1) as f64;
                diff * diff
            })
            .sum();
        if dist < best.0 {
            best = (dist, i);
        }
    }
    best.1
}

struct Collected<'a> {
    updates: Vec<&'a GradientUpdate>,
    per_item: BTreeMap<usize, Vec<(ClientId, &'a [f64])>>,
    stats: AggregationStats,
}

fn collect<'a>(updates: &'a [GradientUpdate], params: &PublicParams) -> Result<Collected<'a>> {
    let mut stats = AggregationStats {
        updates: updates.len(),
        ..Default::default()
    };
    let mut sorted: Vec<&GradientUpdate> = Vec::with_capacity(updates.len());
    for u in updates {
        let shape_ok = u.mlp_delta.len() == params.mlp.num_params()
            && u
                .item_deltas
                .iter()
                .all(|(&i, v)| i < params.num_items() && v.len() == params.dim());
        if !shape_ok {
            log::warn!("rejecting malformed update from client {}", u.client_id.0);
            stats.rejected_updates += 1;
            continue;
        }
        if !u.is_finite() {
            log::warn!("rejecting non-finite update from client {}", u.client_id.0);
            stats.rejected_updates += 1;
            continue;
        }
        sorted.push(u);
    }
    sorted.sort_by_key(|u| u.client_id);
    let mut per_item: BTreeMap<usize, Vec<(ClientId, &[f64])>> = BTreeMap::new();
    for u in &sorted {
        for (&i, v) in &u.item_deltas {
            per_item.entry(i).or_default().push((u.client_id, v.as_slice()));
        }
    }
    Ok(Collected {
        updates: sorted,
        per_item,
        stats,
    })
}

fn apply(params: &mut PublicParams, item_deltas: BTreeMap<usize, Vec<f64>>, mlp_delta: Option<Vec<f64>>) {
    for (i, delta) in item_deltas {
        for (p, d) in params.items.row_mut(i).iter_mut().zip(&delta) {
            *p += d;
        }
    }
    if let Some(m) = mlp_delta {
        for (p, d) in params.mlp.params_mut().iter_mut().zip(&m) {
            *p += d;
        }
    }
}

fn mean_mlp(c: &Collected<'_>, len: usize) -> Option<Vec<f64>> {
    if c.updates.is_empty() {
        return None;
    }
    Some(stable_mean(c.updates.iter().map(|u| u.mlp_delta.as_slice()), len))
}

/// FedAvg over the batch; see [`ItemDenominator`] for item deltas.
pub fn aggregate_fedavg(
    updates: &[GradientUpdate],
    params: &mut PublicParams,
    denominator: ItemDenominator,
) -> Result<AggregationStats> {
    if updates.is_empty() {
        return Err(Error::Empty("no updates to aggregate".into()));
    }
    let c = collect(updates, params)?;
    let batch = c.updates.len();
    let items = c
        .per_item
        .iter()
        .map(|(&i, contribs)| {
            let mut mean = stable_mean(contribs.iter().map(|(_, v)| *v), params.dim());
            if denominator == ItemDenominator::Batch && contribs.len() != batch {
                let scale = contribs.len() as f64 / batch as f64;
                mean.iter_mut().for_each(|x| *x *= scale);
            }
            (i, mean)
        })
        .collect();
    let mlp = mean_mlp(&c, params.mlp.num_params());
    let stats = c.stats;
    apply(params, items, mlp);
    Ok(stats)
}

/// Krum per item embedding; the tower is averaged.
pub fn krum_aggregate(updates: &[GradientUpdate], params: &mut PublicParams) -> Result<AggregationStats> {
    if updates.is_empty() {
        return Err(Error::Empty("no updates to aggregate".into()));
    }
    let c = collect(updates, params)?;
    let mut stats = c.stats;
    let items = c
        .per_item
        .iter()
        .map(|(&i, contribs)| {
            stats.dropped_contributions += contribs.len() - 1;
            (i, contribs[krum_select(contribs)].1.to_vec())
        })
        .collect();
    let mlp = mean_mlp(&c, params.mlp.num_params());
    apply(params, items, mlp);
    Ok(stats)
}

/// Coordinate-wise median of every uploaded coordinate.
pub fn median_aggregate(updates: &[GradientUpdate], params: &mut PublicParams) -> Result<AggregationStats> {
    if updates.is_empty() {
        return Err(Error::Empty("no updates to aggregate".into()));
    }
    let c = collect(updates, params)?;
    let d = params.dim();
    let items = c
        .per_item
        .iter()
        .map(|(&i, contribs)| {
            let vs: Vec<&[f64]> = contribs.iter().map(|(_, v)| *v).collect();
            (i, coordinatewise(&vs, d, median_of))
        })
        .collect();
    let mlp = (!c.updates.is_empty()).then(|| {
        let vs: Vec<&[f64]> = c.updates.iter().map(|u| u.mlp_delta.as_slice()).collect();
        coordinatewise(&vs, params.mlp.num_params(), median_of)
    });
    let stats = c.stats;
    apply(params, items, mlp);
    Ok(stats)
}

/// Coordinate-wise trimmed mean dropping `trim` values from each end.
pub fn trimmed_mean_aggregate(
    updates: &[GradientUpdate],
    params: &mut PublicParams,
    trim: usize,
) -> Result<AggregationStats> {
    if updates.is_empty() {
        return Err(Error::Empty("no updates to aggregate".into()));
    }
    let c = collect(updates, params)?;
    let mut stats = c.stats;
    let d = params.dim();
    let mut warned = false;
    let items = c
        .per_item
        .iter()
        .map(|(&i, contribs)| {
            if contribs.len() > 2 * trim {
                stats.dropped_contributions += 2 * trim;
            }
            let vs: Vec<&[f64]> = contribs.iter().map(|(_, v)| *v).collect();
            (i, coordinatewise(&vs, d, |col| trimmed_mean_of(col, trim, &mut warned)))
        })
        .collect();
    let mlp = (!c.updates.is_empty()).then(|| {
        let vs: Vec<&[f64]> = c.updates.iter().map(|u| u.mlp_delta.as_slice()).collect();
        coordinatewise(&vs, params.mlp.num_params(), |col| trimmed_mean_of(col, trim, &mut warned))
    });
    apply(params, items, mlp);
    Ok(stats)
}

/// Rescales `v` to L2 norm `threshold` when it is longer. Returns whether it clipped.
pub fn clip_to_norm(v: &mut [f64], threshold: f64) -> bool {
    let n = norm(v);
    if n > threshold {
        let s = threshold / n;
        v.iter_mut().for_each(|x| *x *= s);
        true
    } else {
        false
    }
}

/// HiCS: clip each item delta, keep each client's largest `sparsity`
/// fraction of item deltas, then FedAvg the survivors.
pub fn hics_aggregate(
    updates: &[GradientUpdate],
    params: &mut PublicParams,
    cfg: &HicsConfig,
    history: &mut HicsHistory,
    denominator: ItemDenominator,
) -> Result<AggregationStats> {
    if updates.is_empty() {
        return Err(Error::Empty("no updates to aggregate".into()));
    }
    let threshold = match cfg.clip {
        ClipPolicy::Fixed(t) => t,
        ClipPolicy::AdaptiveMedian { multiplier, window } => {
            let mut norms: Vec<f64> = updates
                .iter()
                .filter(|u| u.is_finite())
                .flat_map(|u| u.item_deltas.values().map(|v| norm(v)))
                .collect();
            if !norms.is_empty() {
                history.medians.push(median_of(&mut norms));
                if history.medians.len() > window {
                    let excess = history.medians.len() - window;
                    history.medians.drain(..excess);
                }
            }
            let mut h = history.medians.clone();
            if h.is_empty() {
                f64::INFINITY
            } else {
                multiplier * median_of(&mut h)
            }
        }
    };
    let mut clipped = 0;
    let mut dropped = 0;
    let processed: Vec<GradientUpdate> = updates
        .iter()
        .map(|u| {
            let mut kept: Vec<(usize, Vec<f64>, f64)> = u
                .item_deltas
                .iter()
                .map(|(&i, v)| {
                    let mut v = v.clone();
                    if clip_to_norm(&mut v, threshold) {
                        clipped += 1;
                    }
                    let n = norm(&v);
                    (i, v, n)
                })
                .collect();
            let keep = ((cfg.sparsity * kept.len() as f64).ceil() as usize).min(kept.len());
            kept.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            dropped += kept.len() - keep;
            kept.truncate(keep);
            GradientUpdate {
                client_id: u.client_id,
                item_deltas: kept.into_iter().map(|(i, v, _)| (i, v)).collect(),
                mlp_delta: u.mlp_delta.clone(),
            }
        })
        .collect();
    let mut stats = aggregate_fedavg(&processed, params, denominator)?;
    stats.clipped_contributions = clipped;
    stats.dropped_contributions = dropped;
    stats.threshold = threshold;
    Ok(stats)
}

/// Stateful dispatcher over the configured rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregator {
    pub rule: AggregationRule,
    pub denominator: ItemDenominator,
    hics_history: HicsHistory,
}

impl Aggregator {
    pub fn new(rule: AggregationRule, denominator: ItemDenominator) -> Self {
        Self {
            rule,
            denominator,
            hics_history: HicsHistory::default(),
        }
    }

    pub fn aggregate(&mut self, updates: &[GradientUpdate], params: &mut PublicParams) -> Result<AggregationStats> {
        match self.rule {
            AggregationRule::FedAvg => aggregate_fedavg(updates, params, self.denominator),
            AggregationRule::Krum => krum_aggregate(updates, params),
            AggregationRule::Median => median_aggregate(updates, params),
            AggregationRule::TrimmedMean { trim } => trimmed_mean_aggregate(updates, params, trim),
            AggregationRule::Hics(cfg) => hics_aggregate(updates, params, &cfg, &mut self.hics_history, self.denominator),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Mlp;
    use crate::numeric::DenseMatrix;

    fn params(items: usize, dim: usize) -> PublicParams {
        PublicParams {
            items: DenseMatrix::zeros(items, dim),
            mlp: Mlp::zeros(&[2 * dim, 2]),
        }
    }

    fn upd(id: usize, items: &[(usize, Vec<f64>)], mlp_len: usize) -> GradientUpdate {
        GradientUpdate {
            client_id: ClientId(id),
            item_deltas: items.iter().cloned().collect(),
            mlp_delta: vec![0.0; mlp_len],
        }
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median_of(&mut [1.0, 9.0, 2.0]), 2.0);
        assert_eq!(median_of(&mut [3.0, 1.0]), 2.0);
    }

    #[test]
    fn trimmed_mean_closed_form() {
        let mut w = false;
        assert_eq!(trimmed_mean_of(&mut [1.0, 2.0, 3.0, 100.0], 1, &mut w), 2.5);
        assert_eq!(trimmed_mean_of(&mut [4.0, 4.0, 4.0], 1, &mut w), 4.0);
        assert_eq!(trimmed_mean_of(&mut [1.0, 3.0], 1, &mut w), 2.0);
        assert!(w);
    }

    #[test]
    fn disjoint_items_get_full_delta() {
        let mut p = params(4, 2);
        let n = p.mlp.num_params();
        let ups = [upd(0, &[(1, vec![0.5, -0.5])], n), upd(1, &[(3, vec![2.0, 1.0])], n)];
        aggregate_fedavg(&ups, &mut p, ItemDenominator::Touching).unwrap();
        assert_eq!(p.items.row(1), &[0.5, -0.5]);
        assert_eq!(p.items.row(3), &[2.0, 1.0]);
        assert_eq!(p.items.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn batch_denominator_shrinks_rare_items() {
        let mut p = params(4, 1);
        let n = p.mlp.num_params();
        let ups = [upd(0, &[(1, vec![1.0])], n), upd(1, &[(2, vec![1.0])], n)];
        aggregate_fedavg(&ups, &mut p, ItemDenominator::Batch).unwrap();
        assert_eq!(p.items.row(1), &[0.5]);
    }

    #[test]
    fn non_finite_update_rejected() {
        let mut p = params(2, 1);
        let n = p.mlp.num_params();
        let ups = [upd(0, &[(0, vec![f64::NAN])], n), upd(1, &[(0, vec![1.0])], n)];
        let s = aggregate_fedavg(&ups, &mut p, ItemDenominator::Touching).unwrap();
        assert_eq!(s.rejected_updates, 1);
        assert_eq!(p.items.row(0), &[1.0]);
    }

    #[test]
    fn krum_rejects_outlier() {
        let mut p = params(1, 2);
        let n = p.mlp.num_params();
        let mut ups: Vec<GradientUpdate> = (0..4).map(|i| upd(i, &[(0, vec![0.1, 0.2])], n)).collect();
        ups.push(upd(4, &[(0, vec![50.0, -80.0])], n));
        krum_aggregate(&ups, &mut p).unwrap();
        assert_eq!(p.items.row(0), &[0.1, 0.2]);
    }

    #[test]
    fn hics_clips_to_threshold() {
        let mut v = vec![6.0, 8.0];
        assert!(clip_to_norm(&mut v, 1.0));
        assert!((norm(&v) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hics_degenerate_equals_fedavg() {
        let n = params(3, 2).mlp.num_params();
        let ups = vec![
            upd(0, &[(0, vec![0.1, 0.2]), (1, vec![0.3, -0.1])], n),
            upd(1, &[(1, vec![0.5, 0.5]), (2, vec![-0.2, 0.0])], n),
        ];
        let mut a = params(3, 2);
        let mut b = params(3, 2);
        aggregate_fedavg(&ups, &mut a, ItemDenominator::Touching).unwrap();
        let cfg = HicsConfig {
            clip: ClipPolicy::Fixed(1e9),
            sparsity: 1.0,
        };
        hics_aggregate(&ups, &mut b, &cfg, &mut HicsHistory::default(), ItemDenominator::Touching).unwrap();
        assert_eq!(a, b);
    }
}
