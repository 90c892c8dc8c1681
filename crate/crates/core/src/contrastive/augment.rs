use rand::Rng;

use crate::model::{rec_loss_local, LocalGrads, LocalItems, Sample};
use crate::numeric::{norm, Mlp};

/// Sign-aligned uniform noise of L2 norm exactly `eta`:
/// `ε = ε̄ ⊙ sign(x)`, `ε̄ ~ U(0, 1)^d`, rescaled. `sign(0)` counts as `+1`.
pub fn sign_aligned_noise<R: Rng + ?Sized>(x: &[f64], eta: f64, rng: &mut R) -> Vec<f64> {
    let mut eps: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let e: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            if xi < 0.0 {
                -e
            } else {
                e
            }
        })
        .collect();
    let n = norm(&eps);
    for e in &mut eps {
        *e *= eta / n;
    }
    eps
}

/// Two independent noisy views `(u + ε′, u + ε″)` with `‖ε‖₂ = eta`.
pub fn augment_user<R: Rng + ?Sized>(u: &[f64], eta: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let e1 = sign_aligned_noise(u, eta, rng);
    let e2 = sign_aligned_noise(u, eta, rng);
    (add(u, &e1), add(u, &e2))
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One plain gradient step of the recommendation loss w.r.t. the touched item
/// rows, holding the user view fixed: `Δ = −lr_view · ∇_V L_rec(V | view)`.
pub fn item_view_delta(view: &[f64], items: &LocalItems, mlp: &Mlp, samples: &[Sample], lr_view: f64) -> Vec<f64> {
    let mut grads = LocalGrads::zeros(items.dim, items.len(), mlp.num_params());
    let mut cache = mlp.new_cache();
    rec_loss_local(view, items, mlp, samples, Some(&mut grads), &mut cache);
    grads.items.iter().map(|g| -lr_view * g).collect()
}

/// Item view deltas `(Δ′, Δ″)` built from the two user views.
pub fn augment_items(
    view1: &[f64],
    view2: &[f64],
    items: &LocalItems,
    mlp: &Mlp,
    samples: &[Sample],
    lr_view: f64,
) -> (Vec<f64>, Vec<f64>) {
    (
        item_view_delta(view1, items, mlp, samples, lr_view),
        item_view_delta(view2, items, mlp, samples, lr_view),
    )
}

/// Noise-only item views: sign-aligned noise of norm `eta` per row.
pub fn noise_item_deltas<R: Rng + ?Sized>(items: &LocalItems, eta: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut d1 = Vec::with_capacity(items.rows.len());
    let mut d2 = Vec::with_capacity(items.rows.len());
    for l in 0..items.len() {
        d1.extend(sign_aligned_noise(items.row(l), eta, rng));
        d2.extend(sign_aligned_noise(items.row(l), eta, rng));
    }
    (d1, d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_has_norm_eta_and_matching_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = [0.5, -0.2, 0.0, -1e-9, 3.0];
        let (a, b) = augment_user(&u, 0.1, &mut rng);
        for v in [&a, &b] {
            let eps: Vec<f64> = v.iter().zip(&u).map(|(x, y)| x - y).collect();
            assert!((norm(&eps) - 0.1).abs() < 1e-12);
            for (e, x) in eps.iter().zip(&u) {
                let expect = if *x < 0.0 { -1.0 } else { 1.0 };
                assert_eq!(e.signum(), expect);
            }
        }
        assert_ne!(a, b);
    }
}
