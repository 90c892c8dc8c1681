//! Ranking metrics over full-catalog recommendations: Recall@K, NDCG@K and
//! the exposure ratio ER@K of target items, plus the per-epoch report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{top_k_from_scores, PublicParams, Scorer};

/// `|top-k ∩ truth| / |truth|` averaged over users with a nonempty truth set.
///
/// `truth[u]` must be sorted ascending.
pub fn recall_at_k(recommendations: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    mean_over_users(recommendations, truth, |recs, t| {
        let hits = recs.iter().take(k).filter(|i| t.binary_search(i).is_ok()).count();
        hits as f64 / t.len() as f64
    })
}

/// Binary-relevance NDCG with discount `1/log2(rank + 1)`, ranks from 1.
pub fn ndcg_at_k(recommendations: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    mean_over_users(recommendations, truth, |recs, t| {
        let dcg: f64 = recs
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, i)| t.binary_search(i).is_ok())
            .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
            .sum();
        let idcg: f64 = (0..t.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        dcg / idcg
    })
}

fn mean_over_users(
    recommendations: &[Vec<usize>],
    truth: &[Vec<usize>],
    f: impl Fn(&[usize], &[usize]) -> f64,
) -> Result<f64> {
    if recommendations.len() != truth.len() {
        return Err(Error::dim("recommendation lists", truth.len(), recommendations.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (recs, t) in recommendations.iter().zip(truth) {
        if t.is_empty() {
            continue;
        }
        sum += f(recs, t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no users with test items".into()));
    }
    Ok(sum / n as f64)
}

/// Exposure ratio: mean over targets of the fraction of users that never
/// interacted with the target and have it in their top `k`.
///
/// `recommendations[u]` is the user's ranked list (at least `k` long when
/// the catalog allows) and `interacted[u]` their sorted interaction set over
/// all splits. Targets every user interacted with are skipped with a warning;
/// `None` if no target is eligible.
pub fn exposure_ratio(
    recommendations: &[Vec<usize>],
    interacted: &[Vec<usize>],
    targets: &[usize],
    k: usize,
) -> Result<Option<f64>> {
    if recommendations.len() != interacted.len() {
        return Err(Error::dim("recommendation lists", interacted.len(), recommendations.len()));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &t in targets {
        let mut eligible = 0usize;
        let mut exposed = 0usize;
        for (recs, inter) in recommendations.iter().zip(interacted) {
            if inter.binary_search(&t).is_ok() {
                continue;
            }
            eligible += 1;
            if recs.iter().take(k).any(|&i| i == t) {
                exposed += 1;
            }
        }
        if eligible == 0 {
            log::warn!("target {t} was interacted with by every user; excluded from ER");
            continue;
        }
        sum += exposed as f64 / eligible as f64;
        counted += 1;
    }
    Ok((counted > 0).then(|| sum / counted as f64))
}

/// Per-user inputs for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalUser {
    pub embedding: Vec<f64>,
    /// Items excluded from ranking (train and validation), ascending.
    pub exclude: Vec<usize>,
    /// Test items, ascending.
    pub test: Vec<usize>,
    /// Every interacted item, ascending.
    pub interacted: Vec<usize>,
}

/// Ranked lists and target ranks for a set of users under one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Rankings {
    pub top: Vec<Vec<usize>>,
    /// Mean 1-based rank of the targets among each eligible user's candidates.
    pub target_mean_rank: Option<f64>,
}

/// Scores the full catalog once per user and keeps the top `k`.
pub fn rank_users(params: &PublicParams, users: &[EvalUser], k: usize, targets: &[usize]) -> Rankings {
    let scorer = Scorer::new(params);
    let mut rank_sum = 0.0;
    let mut rank_n = 0usize;
    let top = users
        .iter()
        .map(|u| {
            let scores = scorer.logits(&u.embedding);
            for &t in targets {
                if u.interacted.binary_search(&t).is_ok() {
                    continue;
                }
                let st = scores[t];
                let ahead = scores
                    .iter()
                    .enumerate()
                    .filter(|&(j, &s)| j != t && u.exclude.binary_search(&j).is_err() && (s > st || (s == st && j < t)))
                    .count();
                rank_sum += (ahead + 1) as f64;
                rank_n += 1;
            }
            top_k_from_scores(&scores, &u.exclude, k)
        })
        .collect();
    Rankings {
        top,
        target_mean_rank: (rank_n > 0).then(|| rank_sum / rank_n as f64),
    }
}

/// Metrics and losses for one global epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub recall: f64,
    pub ndcg: f64,
    /// ER@5 of the run's targets; present whenever targets exist.
    pub er: Option<f64>,
    pub rec_loss: f64,
    pub uc_loss: f64,
    pub ic_loss: f64,
    pub reg_loss: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [self.recall, self.ndcg, self.er.unwrap_or(0.0)];
        if unit.iter().any(|x| !x.is_finite() || !(0.0..=1.0).contains(x)) {
            return Err(Error::NonFinite(format!("metric out of range in epoch {}", self.epoch)));
        }
        let losses = [self.rec_loss, self.uc_loss, self.ic_loss, self.reg_loss];
        if losses.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite loss in epoch {}", self.epoch)));
        }
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "epoch,recall@20,ndcg@20,er@5,rec_loss,uc_loss,ic_loss,reg_loss";

/// Writes reports as CSV; missing ER is left empty. Floats use Rust's
/// shortest round-trip formatting, so output is byte-stable.
pub fn write_metrics_csv<W: Write>(mut out: W, reports: &[MetricsReport]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.recall,
            r.ndcg,
            r.er.map(|e| e.to_string()).unwrap_or_default(),
            r.rec_loss,
            r.uc_loss,
            r.ic_loss,
            r.reg_loss
        )?;
    }
    Ok(())
}
