//! Deterministic `f64` numerics: dense matrices, the scoring MLP with
//! analytic backprop, Adam, cosine similarity, correlation and spectra.

mod adam;
mod matrix;
mod mlp;
mod stats;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use matrix::{axpy, dot, norm, DenseMatrix};
pub use mlp::{mlp_forward, sigmoid, ForwardCache, LayerView, Mlp};
pub(crate) use stats::{normalized, standardize_columns};
pub use stats::{correlation_matrix, cosine_similarity, singular_values, symmetric_eigenvalues, variance};

/// Gradient of `cos(x, y)` with respect to `x`, given unit vectors and the
/// norm of `x`: `(ŷ − cos·x̂) / ‖x‖`. Accumulated into `out` scaled by `weight`.
#[inline]
pub(crate) fn cosine_grad_acc(x_hat: &[f64], y_hat: &[f64], cos: f64, x_norm: f64, weight: f64, out: &mut [f64]) {
    let s = weight / x_norm;
    for ((o, yh), xh) in out.iter_mut().zip(y_hat).zip(x_hat) {
        *o += s * (yh - cos * xh);
    }
}

/// Derives a child seed from a base seed and a path of tags (splitmix64).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub(crate) fn rng_for(base: u64, tags: &[u64]) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
