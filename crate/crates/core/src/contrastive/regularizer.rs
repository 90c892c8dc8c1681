//! Server-side calibration that pushes normal items away from hot items:
//! `L_reg = Σ_{i∈hot} −log[ e^{1/τ} / Σ_{j∈sp} e^{sim(v_i, v_j)/τ} ]`.
//!
//! The numerator is constant, so the loss equals
//! `Σ_i (logsumexp_j sim(v_i, v_j)/τ) − |hot|/τ`; it is evaluated verbatim.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::PublicParams;
use crate::numeric::{cosine_grad_acc, dot, normalized, rng_for, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Ascending hot item indices.
    pub hot: Vec<usize>,
    /// Ascending normal item indices; `V_sp` is drawn from these.
    pub normal: Vec<usize>,
    pub sample_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
}

/// Loss value and gradients w.r.t. the hot rows and the sampled normal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerLoss {
    pub loss: f64,
    pub grad_hot: Vec<Vec<f64>>,
    pub grad_sampled: Vec<Vec<f64>>,
}

pub fn regularizer_loss(items: &DenseMatrix, hot: &[usize], sampled: &[usize], tau: f64) -> Result<RegularizerLoss> {
    let d = items.cols();
    let unit = |ids: &[usize]| -> Result<Vec<(Vec<f64>, f64)>> { ids.iter().map(|&i| normalized(items.row(i))).collect() };
    let h = unit(hot)?;
    let s = unit(sampled)?;
    let mut grad_hot = vec![vec![0.0; d]; hot.len()];
    let mut grad_sampled = vec![vec![0.0; d]; sampled.len()];
    let mut loss = 0.0;
    let mut sims = vec![0.0; s.len()];
    for (i, (hi, hn)) in h.iter().enumerate() {
        for (j, (sj, _)) in s.iter().enumerate() {
            sims[j] = dot(hi, sj);
        }
        let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
        let z: f64 = sims.iter().map(|c| (c / tau - m).exp()).sum();
        loss += m + z.ln() - 1.0 / tau;
        for (j, (sj, sn)) in s.iter().enumerate() {
            let w = (sims[j] / tau - m).exp() / z / tau;
            cosine_grad_acc(hi, sj, sims[j], *hn, w, &mut grad_hot[i]);
            cosine_grad_acc(sj, hi, sims[j], *sn, w, &mut grad_sampled[j]);
        }
    }
    Ok(RegularizerLoss {
        loss,
        grad_hot,
        grad_sampled,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularizerReport {
    /// Loss before the first step.
    pub loss: f64,
    pub sampled: Vec<usize>,
}

/// Samples `V_sp` from the normal items and takes `steps` gradient-descent
/// steps on `L_reg`. Only item embeddings change. No-op when either the hot
/// or the normal set is empty.
pub fn popularity_regularizer_step(
    params: &mut PublicParams,
    cfg: &RegularizerConfig,
    seed: u64,
) -> Result<RegularizerReport> {
    if cfg.hot.is_empty() || cfg.normal.is_empty() || cfg.steps == 0 {
        return Ok(RegularizerReport::default());
    }
    let mut rng = rng_for(seed, &[0x4e6]);
    let k = cfg.sample_size.min(cfg.normal.len());
    let mut sampled: Vec<usize> = index::sample(&mut rng, cfg.normal.len(), k)
        .into_iter()
        .map(|i| cfg.normal[i])
        .collect();
    sampled.sort_unstable();
    let mut report = RegularizerReport {
        loss: 0.0,
        sampled: sampled.clone(),
    };
    for step in 0..cfg.steps {
        let r = regularizer_loss(&params.items, &cfg.hot, &sampled, cfg.tau)?;
        if step == 0 {
            report.loss = r.loss;
        }
        for (g, &i) in r.grad_hot.iter().zip(&cfg.hot) {
            crate::numeric::axpy(-cfg.lr, g, params.items.row_mut(i));
        }
        for (g, &j) in r.grad_sampled.iter().zip(&sampled) {
            crate::numeric::axpy(-cfg.lr, g, params.items.row_mut(j));
        }
    }
    Ok(report)
}
