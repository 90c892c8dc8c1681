//! Neural collaborative filtering: `r̂ = σ(hᵀ·MLP([u; v]))`, the binary
//! cross-entropy recommendation loss, client-local training and top-K.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::{ClientId, GradientUpdate};
use crate::numeric::{sigmoid, AdamState, DenseMatrix, ForwardCache, Mlp};

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_HIDDEN: [usize; 3] = [64, 32, 16];
pub const INIT_RANGE: f64 = 0.01;
/// Predictions are clamped to `[P_CLAMP, 1 − P_CLAMP]` inside the loss.
pub const P_CLAMP: f64 = 1e-7;

/// Shared model state: item embedding table plus the scoring tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicParams {
    pub items: DenseMatrix,
    pub mlp: Mlp,
}

impl PublicParams {
    pub fn init<R: Rng + ?Sized>(num_items: usize, dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let data = (0..num_items * dim)
            .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        let items = DenseMatrix::from_vec(num_items, dim, data).expect("shape is consistent");
        let mut dims = vec![2 * dim];
        dims.extend_from_slice(hidden);
        Self {
            items,
            mlp: Mlp::init(&dims, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.items.is_finite() && self.mlp.is_finite()
    }

    /// Order-sensitive FNV-1a digest of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.items.as_slice().iter().chain(self.mlp.params()) {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

pub fn init_user_embedding<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect()
}

/// Private state held by one client. Never part of an upload.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub user_embedding: Vec<f64>,
    pub dataset: ClientDataset,
    pub user_adam: AdamState,
}

impl ClientState {
    pub fn new(user_embedding: Vec<f64>, dataset: ClientDataset, lr: f64) -> Self {
        let n = user_embedding.len();
        Self {
            user_embedding,
            dataset,
            user_adam: AdamState::new(n, lr),
        }
    }

    pub fn id(&self) -> ClientId {
        ClientId(self.dataset.owner)
    }
}

/// Preference score for one (user, item) pair.
pub fn predict_score(user: &[f64], item: usize, params: &PublicParams) -> Result<f64> {
    if item >= params.num_items() {
        return Err(Error::IndexOutOfRange {
            index: item,
            len: params.num_items(),
        });
    }
    if user.len() != params.dim() {
        return Err(Error::dim("user embedding", params.dim(), user.len()));
    }
    let mut input = Vec::with_capacity(2 * params.dim());
    input.extend_from_slice(user);
    input.extend_from_slice(params.items.row(item));
    Ok(crate::numeric::mlp_forward(&input, &params.mlp)?.0)
}

/// Local copy of the item rows a client touches.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalItems {
    pub ids: Vec<usize>,
    pub rows: Vec<f64>,
    pub dim: usize,
    index: HashMap<usize, usize>,
}

impl LocalItems {
    /// `ids` must be ascending and distinct.
    pub fn gather(items: &DenseMatrix, ids: Vec<usize>) -> Self {
        let dim = items.cols();
        let mut rows = Vec::with_capacity(ids.len() * dim);
        for &i in &ids {
            rows.extend_from_slice(items.row(i));
        }
        let index = ids.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        Self { ids, rows, dim, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn local(&self, item: usize) -> Option<usize> {
        self.index.get(&item).copied()
    }

    #[inline]
    pub fn row(&self, local: usize) -> &[f64] {
        &self.rows[local * self.dim..(local + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, local: usize) -> &mut [f64] {
        &mut self.rows[local * self.dim..(local + 1) * self.dim]
    }
}

/// One labelled training example, referencing a local item row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub local: usize,
    pub label: f64,
}

pub fn samples_for(dataset: &ClientDataset, items: &LocalItems) -> Vec<Sample> {
    let pos = dataset.positives.iter().map(|&i| Sample {
        local: items.local(i).expect("positive is touched"),
        label: 1.0,
    });
    let neg = dataset.negatives.iter().map(|&i| Sample {
        local: items.local(i).expect("negative is touched"),
        label: 0.0,
    });
    pos.chain(neg).collect()
}

/// Gradient buffers matching a [`LocalWorkspace`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    pub user: Vec<f64>,
    pub items: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl LocalGrads {
    pub fn zeros(dim: usize, num_items: usize, mlp_len: usize) -> Self {
        Self {
            user: vec![0.0; dim],
            items: vec![0.0; num_items * dim],
            mlp: vec![0.0; mlp_len],
        }
    }

    pub fn clear(&mut self) {
        self.user.fill(0.0);
        self.items.fill(0.0);
        self.mlp.fill(0.0);
    }
}

/// Summed binary cross-entropy over `samples`, clamping predictions to
/// `[P_CLAMP, 1 − P_CLAMP]`. Gradients are accumulated when `grads` is given.
pub fn rec_loss_local(
    user: &[f64],
    items: &LocalItems,
    mlp: &Mlp,
    samples: &[Sample],
    grads: Option<&mut LocalGrads>,
    cache: &mut ForwardCache,
) -> f64 {
    bce_local(user, items, mlp, samples, grads, cache, true)
}

/// Unclamped logistic loss `softplus(∓logit)`: same minimizer as the
/// recommendation loss, but its gradient never vanishes at saturation.
pub fn logistic_loss_local(
    user: &[f64],
    items: &LocalItems,
    mlp: &Mlp,
    samples: &[Sample],
    grads: Option<&mut LocalGrads>,
    cache: &mut ForwardCache,
) -> f64 {
    bce_local(user, items, mlp, samples, grads, cache, false)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn bce_local(
    user: &[f64],
    items: &LocalItems,
    mlp: &Mlp,
    samples: &[Sample],
    mut grads: Option<&mut LocalGrads>,
    cache: &mut ForwardCache,
    clamp: bool,
) -> f64 {
    let d = items.dim;
    let mut dinput = vec![0.0; 2 * d];
    let mut loss = 0.0;
    for s in samples {
        let input = mlp.input_buffer_mut(cache);
        input[..d].copy_from_slice(user);
        input[d..].copy_from_slice(items.row(s.local));
        let logit = mlp.forward_cached(cache);
        let p = sigmoid(logit);
        let dlogit = if clamp {
            let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            loss -= s.label * pc.ln() + (1.0 - s.label) * (1.0 - pc).ln();
            // zero where the clamp is active
            if p == pc {
                p - s.label
            } else {
                0.0
            }
        } else {
            loss += s.label * softplus(-logit) + (1.0 - s.label) * softplus(logit);
            p - s.label
        };
        if let Some(g) = grads.as_deref_mut() {
            if dlogit == 0.0 {
                continue;
            }
            dinput.fill(0.0);
            mlp.backward(cache, dlogit, &mut g.mlp, Some(&mut dinput));
            for (gu, di) in g.user.iter_mut().zip(&dinput[..d]) {
                *gu += di;
            }
            let row = &mut g.items[s.local * d..(s.local + 1) * d];
            for (gv, di) in row.iter_mut().zip(&dinput[d..]) {
                *gv += di;
            }
        }
    }
    loss
}

/// Gradients of the recommendation loss for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct RecGradients {
    pub user: Vec<f64>,
    /// Only items in the client's positives ∪ negatives.
    pub items: BTreeMap<usize, Vec<f64>>,
    pub mlp: Vec<f64>,
}

/// Recommendation loss of `client` against `params` with full gradients.
pub fn rec_loss(client: &ClientState, params: &PublicParams) -> Result<(f64, RecGradients)> {
    if client.dataset.positives.is_empty() {
        return Err(Error::Empty(format!("client {} has no positives", client.dataset.owner)));
    }
    let items = LocalItems::gather(&params.items, client.dataset.touched_items());
    let samples = samples_for(&client.dataset, &items);
    let mut grads = LocalGrads::zeros(params.dim(), items.len(), params.mlp.num_params());
    let mut cache = params.mlp.new_cache();
    let loss = rec_loss_local(
        &client.user_embedding,
        &items,
        &params.mlp,
        &samples,
        Some(&mut grads),
        &mut cache,
    );
    let d = params.dim();
    let item_grads = items
        .ids
        .iter()
        .enumerate()
        .map(|(l, &g)| (g, grads.items[l * d..(l + 1) * d].to_vec()))
        .collect();
    Ok((
        loss,
        RecGradients {
            user: grads.user,
            items: item_grads,
            mlp: grads.mlp,
        },
    ))
}

/// Working copy a client trains on during one round.
#[derive(Debug, Clone)]
pub struct LocalWorkspace {
    pub user: Vec<f64>,
    pub items: LocalItems,
    pub mlp: Mlp,
    pub samples: Vec<Sample>,
}

/// Loss values observed on the first local epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub user_contrastive: f64,
    pub item_contrastive: f64,
    pub uniformity: f64,
}

/// Extra client-side terms optimized jointly with the recommendation loss.
pub trait AuxiliaryLoss {
    /// Called once per round on the freshly received workspace, before any update.
    fn prepare(&mut self, ws: &LocalWorkspace) -> Result<()>;

    /// Adds weighted gradients of the auxiliary terms to `grads` and returns
    /// their unweighted values.
    fn accumulate(&self, ws: &LocalWorkspace, grads: &mut LocalGrads) -> Result<LossBreakdown>;
}

/// Plain recommendation training.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAuxiliary;

impl AuxiliaryLoss for NoAuxiliary {
    fn prepare(&mut self, _ws: &LocalWorkspace) -> Result<()> {
        Ok(())
    }

    fn accumulate(&self, _ws: &LocalWorkspace, _grads: &mut LocalGrads) -> Result<LossBreakdown> {
        Ok(LossBreakdown::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    /// Local epochs `L`.
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self { epochs: 1, lr: 0.001 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub update: GradientUpdate,
    pub losses: LossBreakdown,
}

/// Runs `cfg.epochs` full-batch Adam steps of `L_rec + aux` on the client's
/// data against a snapshot of `params`.
///
/// The user embedding is updated in place with the client's persistent
/// optimizer; public parameters use fresh moments each round and are
/// uploaded as `trained − received`.
pub fn local_train(
    client: &mut ClientState,
    params: &PublicParams,
    cfg: &LocalTrainConfig,
    aux: &mut dyn AuxiliaryLoss,
) -> Result<LocalOutcome> {
    let d = params.dim();
    let mlp_len = params.mlp.num_params();
    if client.dataset.is_empty() || cfg.epochs == 0 {
        return Ok(LocalOutcome {
            update: GradientUpdate::empty(client.id(), mlp_len),
            losses: LossBreakdown::default(),
        });
    }
    let items = LocalItems::gather(&params.items, client.dataset.touched_items());
    let samples = samples_for(&client.dataset, &items);
    let mut ws = LocalWorkspace {
        user: client.user_embedding.clone(),
        items,
        mlp: params.mlp.clone(),
        samples,
    };
    aux.prepare(&ws)?;

    let mut item_adam = AdamState::new(ws.items.rows.len(), cfg.lr);
    let mut mlp_adam = AdamState::new(mlp_len, cfg.lr);
    let mut grads = LocalGrads::zeros(d, ws.items.len(), mlp_len);
    let mut cache = ws.mlp.new_cache();
    let mut first: Option<LossBreakdown> = None;
    for _ in 0..cfg.epochs {
        grads.clear();
        let rec = rec_loss_local(&ws.user, &ws.items, &ws.mlp, &ws.samples, Some(&mut grads), &mut cache);
        let mut losses = aux.accumulate(&ws, &mut grads)?;
        losses.rec = rec;
        first.get_or_insert(losses);
        client.user_adam.step(&mut ws.user, &grads.user)?;
        item_adam.step(&mut ws.items.rows, &grads.items)?;
        mlp_adam.step(ws.mlp.params_mut(), &grads.mlp)?;
    }

    let mut item_deltas = BTreeMap::new();
    for (l, &g) in ws.items.ids.iter().enumerate() {
        let delta: Vec<f64> = ws.items.row(l).iter().zip(params.items.row(g)).map(|(a, b)| a - b).collect();
        item_deltas.insert(g, delta);
    }
    let mlp_delta = ws.mlp.params().iter().zip(params.mlp.params()).map(|(a, b)| a - b).collect();
    client.user_embedding = ws.user;
    Ok(LocalOutcome {
        update: GradientUpdate {
            client_id: client.id(),
            item_deltas,
            mlp_delta,
        },
        losses: first.unwrap_or_default(),
    })
}

/// Fast full-catalog scoring: the item half of the first layer is
/// precomputed once per parameter snapshot.
pub struct Scorer<'a> {
    params: &'a PublicParams,
    item_pre: Vec<f64>,
    h1: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a PublicParams) -> Self {
        let d = params.dim();
        let layer = params.mlp.layer(0);
        let h1 = layer.out_dim;
        let mut item_pre = vec![0.0; params.num_items() * h1];
        for j in 0..params.num_items() {
            let v = params.items.row(j);
            for o in 0..h1 {
                let w = &layer.weight[o * 2 * d + d..(o + 1) * 2 * d];
                item_pre[j * h1 + o] = crate::numeric::dot(w, v) + layer.bias[o];
            }
        }
        Self { params, item_pre, h1 }
    }

    /// Logits `hᵀ·MLP([u; v_j])` for every item.
    pub fn logits(&self, user: &[f64]) -> Vec<f64> {
        let d = self.params.dim();
        let mlp = &self.params.mlp;
        let layer0 = mlp.layer(0);
        let user_pre: Vec<f64> = (0..self.h1)
            .map(|o| crate::numeric::dot(&layer0.weight[o * 2 * d..o * 2 * d + d], user))
            .collect();
        let n_layers = mlp.num_layers();
        let mut acts: Vec<Vec<f64>> = mlp.dims()[1..].iter().map(|&k| vec![0.0; k]).collect();
        let mut out = Vec::with_capacity(self.params.num_items());
        for j in 0..self.params.num_items() {
            let pre = &self.item_pre[j * self.h1..(j + 1) * self.h1];
            for ((a, p), q) in acts[0].iter_mut().zip(pre).zip(&user_pre) {
                let z = p + q;
                *a = if z > 0.0 { z } else { 0.0 };
            }
            for l in 1..n_layers {
                let layer = mlp.layer(l);
                let (before, after) = acts.split_at_mut(l);
                let x = &before[l - 1];
                for (o, (row, b)) in after[0]
                    .iter_mut()
                    .zip(layer.weight.chunks_exact(layer.in_dim).zip(layer.bias))
                {
                    let z = crate::numeric::dot(row, x) + b;
                    *o = if z > 0.0 { z } else { 0.0 };
                }
            }
            out.push(crate::numeric::dot(mlp.head(), &acts[n_layers - 1]));
        }
        out
    }
}

/// Indices of the `k` largest scores outside `exclude` (ascending), ordered
/// by score descending then index ascending.
pub fn top_k_from_scores(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = Vec::with_capacity(scores.len());
    let mut ex = exclude.iter().peekable();
    for i in 0..scores.len() {
        while ex.peek().is_some_and(|&&e| e < i) {
            ex.next();
        }
        if ex.peek() != Some(&&i) {
            cand.push(i);
        }
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand
}

/// Top-`k` recommendation for one user; `exclude` must be ascending.
pub fn top_k(user: &[f64], params: &PublicParams, exclude: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Domain("top_k needs k >= 1".into()));
    }
    if user.len() != params.dim() {
        return Err(Error::dim("user embedding", params.dim(), user.len()));
    }
    Ok(top_k_from_scores(&Scorer::new(params).logits(user), exclude, k))
}
