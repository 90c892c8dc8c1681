//! Contrastive augmentation for federated clients.
//!
//! User views are the private embedding plus sign-aligned noise, contrasted
//! against server-published synthetic users. Item views are the touched item
//! rows shifted by one recommendation-gradient step taken under each user
//! view. The server additionally calibrates item embeddings with a
//! popularity-based regularizer, and a correlation-based uniformity penalty
//! is available for the proof-of-concept study.

mod augment;
mod losses;
mod regularizer;
mod synthetic;
mod uniformity;

pub use augment::{augment_items, augment_user, item_view_delta, noise_item_deltas, sign_aligned_noise};
pub use losses::{item_contrastive_loss, user_contrastive_loss, UserContrastive};
pub use regularizer::{popularity_regularizer_step, regularizer_loss, RegularizerConfig, RegularizerLoss, RegularizerReport};
pub use synthetic::{
    build_synthetic_pool, refresh_synthetic_embeddings, PoolConfig, SyntheticSampling, SyntheticUser,
    SyntheticUserPool,
};
pub use uniformity::uniformity_loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    rec_loss_local, samples_for, AuxiliaryLoss, ClientState, LocalGrads, LocalItems, LocalWorkspace, LossBreakdown,
    PublicParams,
};
use crate::numeric::{rng_for, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Noise norm `η`.
    pub eta: f64,
    /// Temperature `τ`.
    pub tau: f64,
    /// User contrastive weight `λ₁`.
    pub lambda_user: f64,
    /// Item contrastive weight `λ₂`.
    pub lambda_item: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            tau: 0.2,
            lambda_user: 0.5,
            lambda_item: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config("contrastive.eta", "must be > 0"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("contrastive.tau", "must be > 0"));
        }
        if !(self.lambda_user >= 0.0) {
            return Err(Error::config("contrastive.lambda_user", "must be >= 0"));
        }
        if !(self.lambda_item >= 0.0) {
            return Err(Error::config("contrastive.lambda_item", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemViewMode {
    /// One recommendation-gradient step under each user view.
    Optimization,
    /// Sign-aligned uniform noise, as for user views.
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub user: bool,
    pub item: bool,
    pub aug: AugmentationConfig,
    pub item_views: ItemViewMode,
    /// Step size of the item-view gradient step.
    pub view_lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            user: true,
            item: true,
            aug: AugmentationConfig::default(),
            item_views: ItemViewMode::Optimization,
            view_lr: 0.001,
        }
    }
}

/// Client-side auxiliary objective: contrastive terms and/or the
/// uniformity penalty.
pub struct ClientObjective<'a> {
    contrastive: Option<&'a ContrastiveConfig>,
    synthetic_unit: &'a [Vec<f64>],
    uniformity_alpha: f64,
    seed: u64,
    eps1: Vec<f64>,
    eps2: Vec<f64>,
    delta1: Vec<f64>,
    delta2: Vec<f64>,
}

impl<'a> ClientObjective<'a> {
    /// `seed` drives the client's view noise for this round.
    pub fn new(
        contrastive: Option<&'a ContrastiveConfig>,
        synthetic_unit: &'a [Vec<f64>],
        uniformity_alpha: f64,
        seed: u64,
    ) -> Self {
        Self {
            contrastive,
            synthetic_unit,
            uniformity_alpha,
            seed,
            eps1: Vec::new(),
            eps2: Vec::new(),
            delta1: Vec::new(),
            delta2: Vec::new(),
        }
    }

    pub fn user_noise(&self) -> (&[f64], &[f64]) {
        (&self.eps1, &self.eps2)
    }

    pub fn item_deltas(&self) -> (&[f64], &[f64]) {
        (&self.delta1, &self.delta2)
    }
}

impl AuxiliaryLoss for ClientObjective<'_> {
    fn prepare(&mut self, ws: &LocalWorkspace) -> Result<()> {
        let Some(cfg) = self.contrastive else {
            return Ok(());
        };
        let mut rng = rng_for(self.seed, &[0xa06]);
        self.eps1 = sign_aligned_noise(&ws.user, cfg.aug.eta, &mut rng);
        self.eps2 = sign_aligned_noise(&ws.user, cfg.aug.eta, &mut rng);
        if cfg.item {
            let (d1, d2) = match cfg.item_views {
                ItemViewMode::Optimization => {
                    let v1 = augment::add(&ws.user, &self.eps1);
                    let v2 = augment::add(&ws.user, &self.eps2);
                    augment_items(&v1, &v2, &ws.items, &ws.mlp, &ws.samples, cfg.view_lr)
                }
                ItemViewMode::Noise => noise_item_deltas(&ws.items, cfg.aug.eta, &mut rng),
            };
            self.delta1 = d1;
            self.delta2 = d2;
        }
        Ok(())
    }

    fn accumulate(&self, ws: &LocalWorkspace, grads: &mut LocalGrads) -> Result<LossBreakdown> {
        let mut out = LossBreakdown::default();
        if let Some(cfg) = self.contrastive {
            if cfg.user {
                let v1 = augment::add(&ws.user, &self.eps1);
                let v2 = augment::add(&ws.user, &self.eps2);
                let r = user_contrastive_loss(&ws.user, &v1, &v2, self.synthetic_unit, cfg.aug.tau)?;
                out.user_contrastive = r.loss;
                crate::numeric::axpy(cfg.aug.lambda_user, &r.grad_through_views(), &mut grads.user);
            }
            if cfg.item && ws.items.len() > 0 {
                let v1 = augment::add(&ws.items.rows, &self.delta1);
                let v2 = augment::add(&ws.items.rows, &self.delta2);
                let (l, g1, g2) = item_contrastive_loss(&v1, &v2, ws.items.dim, cfg.aug.tau)?;
                out.item_contrastive = l;
                crate::numeric::axpy(cfg.aug.lambda_item, &g1, &mut grads.items);
                crate::numeric::axpy(cfg.aug.lambda_item, &g2, &mut grads.items);
            }
        }
        if self.uniformity_alpha > 0.0 && ws.items.len() >= 2 {
            let m = DenseMatrix::from_vec(ws.items.len(), ws.items.dim, ws.items.rows.clone())?;
            match uniformity_loss(&m) {
                Ok((l, g)) => {
                    out.uniformity = l;
                    crate::numeric::axpy(self.uniformity_alpha, g.as_slice(), &mut grads.items);
                }
                Err(e) => log::debug!("uniformity term skipped: {e}"),
            }
        }
        Ok(out)
    }
}

/// Joint objective `L_rec + λ₁·L_uc + λ₂·L_ic` for one client and its
/// gradients w.r.t. the user embedding, the touched item rows and the tower.
pub fn joint_loss(
    client: &ClientState,
    params: &PublicParams,
    pool: &SyntheticUserPool,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<(f64, LocalGrads, LossBreakdown)> {
    let items = LocalItems::gather(&params.items, client.dataset.touched_items());
    let samples = samples_for(&client.dataset, &items);
    let ws = LocalWorkspace {
        user: client.user_embedding.clone(),
        items,
        mlp: params.mlp.clone(),
        samples,
    };
    let unit = pool.unit_embeddings()?;
    let mut obj = ClientObjective::new(Some(cfg), &unit, 0.0, seed);
    obj.prepare(&ws)?;
    let mut grads = LocalGrads::zeros(params.dim(), ws.items.len(), params.mlp.num_params());
    let mut cache = ws.mlp.new_cache();
    let rec = rec_loss_local(&ws.user, &ws.items, &ws.mlp, &ws.samples, Some(&mut grads), &mut cache);
    let mut parts = obj.accumulate(&ws, &mut grads)?;
    parts.rec = rec;
    let total = rec
        + if cfg.user { cfg.aug.lambda_user * parts.user_contrastive } else { 0.0 }
        + if cfg.item { cfg.aug.lambda_item * parts.item_contrastive } else { 0.0 };
    Ok((total, grads, parts))
}
