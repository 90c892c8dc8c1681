//! InfoNCE-style objectives on user and item views, with analytic gradients.

use crate::error::{Error, Result};
use crate::numeric::{cosine_grad_acc, dot, normalized};

/// Numerically stable `ln Σ exp(x)`.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(xs: &[f64], out: &mut Vec<f64>) {
    let lse = log_sum_exp(xs);
    out.clear();
    out.extend(xs.iter().map(|x| (x - lse).exp()));
}

/// Value and gradients of the user contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct UserContrastive {
    pub loss: f64,
    /// Gradient through the direct `sim(u, s_j)` terms.
    pub grad_user: Vec<f64>,
    pub grad_view1: Vec<f64>,
    pub grad_view2: Vec<f64>,
}

impl UserContrastive {
    /// Total gradient w.r.t. `u` when both views are `u` plus fixed noise.
    pub fn grad_through_views(&self) -> Vec<f64> {
        self.grad_user
            .iter()
            .zip(&self.grad_view1)
            .zip(&self.grad_view2)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

/// `−log[ e^{sim(u′,u″)/τ} / (e^{sim(u′,u″)/τ} + Σ_j e^{sim(u,s_j)/τ}) ]`.
///
/// `synthetic_unit` holds the frozen synthetic embeddings, unit-normalized.
pub fn user_contrastive_loss(
    user: &[f64],
    view1: &[f64],
    view2: &[f64],
    synthetic_unit: &[Vec<f64>],
    tau: f64,
) -> Result<UserContrastive> {
    if tau <= 0.0 {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    let d = user.len();
    let (a_hat, na) = normalized(view1)?;
    let (b_hat, nb) = normalized(view2)?;
    let (u_hat, nu) = normalized(user)?;
    let c_ab = dot(&a_hat, &b_hat);
    let mut logits = Vec::with_capacity(synthetic_unit.len() + 1);
    logits.push(c_ab / tau);
    let mut sims = Vec::with_capacity(synthetic_unit.len());
    for s in synthetic_unit {
        if s.len() != d {
            return Err(Error::dim("synthetic user embedding", d, s.len()));
        }
        let c = dot(&u_hat, s);
        sims.push(c);
        logits.push(c / tau);
    }
    let loss = log_sum_exp(&logits) - logits[0];
    let mut p = Vec::new();
    softmax_into(&logits, &mut p);

    let mut grad_view1 = vec![0.0; d];
    let mut grad_view2 = vec![0.0; d];
    let w0 = (p[0] - 1.0) / tau;
    cosine_grad_acc(&a_hat, &b_hat, c_ab, na, w0, &mut grad_view1);
    cosine_grad_acc(&b_hat, &a_hat, c_ab, nb, w0, &mut grad_view2);
    let mut grad_user = vec![0.0; d];
    for (j, s) in synthetic_unit.iter().enumerate() {
        cosine_grad_acc(&u_hat, s, sims[j], nu, p[j + 1] / tau, &mut grad_user);
    }
    Ok(UserContrastive {
        loss: loss.max(0.0),
        grad_user,
        grad_view1,
        grad_view2,
    })
}

/// `Σ_k −log[ e^{sim(v′_k, v″_k)/τ} / Σ_j e^{sim(v′_k, v″_j)/τ} ]` over the
/// `n` rows of `views1`/`views2` (row-major `n × dim`).
///
/// Returns the loss and the gradients w.r.t. each view matrix.
pub fn item_contrastive_loss(
    views1: &[f64],
    views2: &[f64],
    dim: usize,
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if tau <= 0.0 {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    if views1.len() != views2.len() || views1.len() % dim != 0 {
        return Err(Error::dim("item views", views1.len(), views2.len()));
    }
    let n = views1.len() / dim;
    let mut a_hat = Vec::with_capacity(views1.len());
    let mut b_hat = Vec::with_capacity(views2.len());
    let mut na = Vec::with_capacity(n);
    let mut nb = Vec::with_capacity(n);
    for k in 0..n {
        let (a, an) = normalized(&views1[k * dim..(k + 1) * dim])?;
        let (b, bn) = normalized(&views2[k * dim..(k + 1) * dim])?;
        a_hat.extend(a);
        b_hat.extend(b);
        na.push(an);
        nb.push(bn);
    }
    // cosine matrix C_kj = â_k · b̂_j, and softmax weights along j
    let mut cos = vec![0.0; n * n];
    for k in 0..n {
        let ak = &a_hat[k * dim..(k + 1) * dim];
        for j in 0..n {
            cos[k * n + j] = dot(ak, &b_hat[j * dim..(j + 1) * dim]);
        }
    }
    let mut loss = 0.0;
    // G_kj = (P_kj − δ_kj)/τ
    let mut g = vec![0.0; n * n];
    let mut logits = vec![0.0; n];
    let mut p = Vec::with_capacity(n);
    for k in 0..n {
        for j in 0..n {
            logits[j] = cos[k * n + j] / tau;
        }
        loss += log_sum_exp(&logits) - logits[k];
        softmax_into(&logits, &mut p);
        for j in 0..n {
            g[k * n + j] = (p[j] - if j == k { 1.0 } else { 0.0 }) / tau;
        }
    }

    let mut grad1 = vec![0.0; n * dim];
    let mut grad2 = vec![0.0; n * dim];
    for k in 0..n {
        // ∂/∂a_k = (Σ_j G_kj b̂_j − (Σ_j G_kj C_kj) â_k) / ‖a_k‖
        let out = &mut grad1[k * dim..(k + 1) * dim];
        let mut coef = 0.0;
        for j in 0..n {
            let gkj = g[k * n + j];
            coef += gkj * cos[k * n + j];
            crate::numeric::axpy(gkj / na[k], &b_hat[j * dim..(j + 1) * dim], out);
        }
        crate::numeric::axpy(-coef / na[k], &a_hat[k * dim..(k + 1) * dim], out);
    }
    for j in 0..n {
        let out = &mut grad2[j * dim..(j + 1) * dim];
        let mut coef = 0.0;
        for k in 0..n {
            let gkj = g[k * n + j];
            coef += gkj * cos[k * n + j];
            crate::numeric::axpy(gkj / nb[j], &a_hat[k * dim..(k + 1) * dim], out);
        }
        crate::numeric::axpy(-coef / nb[j], &b_hat[j * dim..(j + 1) * dim], out);
    }
    Ok((loss.max(0.0), grad1, grad2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        normalized(v).unwrap().0
    }

    #[test]
    fn empty_pool_identical_views_is_zero() {
        let u = [0.3, -0.1, 0.2];
        let r = user_contrastive_loss(&u, &u, &u, &[], 0.2).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn one_synthetic_user_parallel_gives_ln2() {
        let u = [0.3, -0.1, 0.2];
        let s = vec![unit(&[0.6, -0.2, 0.4])];
        let r = user_contrastive_loss(&u, &u, &u, &s, 0.2).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_item_loss_is_zero() {
        let v = [0.1, 0.4];
        let (l, _, _) = item_contrastive_loss(&v, &v, 2, 0.2).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn identical_items_give_n_ln_n() {
        let v: Vec<f64> = [0.1, 0.4, 0.3].repeat(5);
        let (l, _, _) = item_contrastive_loss(&v, &v, 3, 0.2).unwrap();
        assert!((l - 5.0 * 5f64.ln()).abs() < 1e-10, "{l}");
    }

    #[test]
    fn zero_view_is_domain_error() {
        assert!(user_contrastive_loss(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[], 0.2).is_err());
    }
}
