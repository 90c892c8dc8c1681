//! Feed-forward tower with ReLU hidden layers and a linear scoring head.
//!
//! Parameters live in one flat buffer laid out as
//! `[W1, b1, W2, b2, ..., Wn, bn, h]`, each `W` row-major `out × in`.
//! Gradients, optimizer moments and uploaded deltas share that layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Borrowed view of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `[input, hidden_1, ..., hidden_n]`; the head has length `hidden_n`.
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, reused across samples.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l]` the post-ReLU output of layer `l`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }

    pub fn activation(&self, layer: usize) -> &[f64] {
        &self.acts[layer]
    }
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let n = Self::count_params(dims);
        Self {
            dims: dims.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// Glorot-uniform weights, zero biases, uniform head.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let mut mlp = Self::zeros(dims);
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut mlp.params[off..off + fan_in * fan_out] {
                *p = rng.gen_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        let last = *dims.last().unwrap();
        let limit = (6.0 / (last + 1) as f64).sqrt();
        for p in &mut mlp.params[off..] {
            *p = rng.gen_range(-limit..limit);
        }
        mlp
    }

    /// Builds a tower from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: &[(DenseMatrix, Vec<f64>)], head: &[f64]) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Empty("MLP has no layers".into()))?;
        let mut dims = vec![first.0.cols()];
        let mut params = Vec::new();
        for (l, (w, b)) in layers.iter().enumerate() {
            let expected_in = *dims.last().unwrap();
            if w.cols() != expected_in {
                return Err(Error::dim(format!("layer {l} input"), expected_in, w.cols()));
            }
            if b.len() != w.rows() {
                return Err(Error::dim(format!("layer {l} bias"), w.rows(), b.len()));
            }
            params.extend_from_slice(w.as_slice());
            params.extend_from_slice(b);
            dims.push(w.rows());
        }
        let last = *dims.last().unwrap();
        if head.len() != last {
            return Err(Error::dim("output head", last, head.len()));
        }
        params.extend_from_slice(head);
        Ok(Self { dims, params })
    }

    fn count_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets `(weight, bias)` of `layer` within the flat buffer.
    pub fn layer_range(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let off = self.layer_offset(layer);
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    pub fn head_range(&self) -> std::ops::Range<usize> {
        let n = self.params.len();
        n - self.dims.last().unwrap()..n
    }

    pub fn layer(&self, layer: usize) -> LayerView<'_> {
        let (w, b) = self.layer_range(layer);
        LayerView {
            weight: &self.params[w],
            bias: &self.params[b],
            in_dim: self.dims[layer],
            out_dim: self.dims[layer + 1],
        }
    }

    pub fn head(&self) -> &[f64] {
        &self.params[self.head_range()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub fn new_cache(&self) -> ForwardCache {
        let max = *self.dims.iter().max().unwrap();
        ForwardCache {
            acts: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: Vec::with_capacity(max),
            delta_prev: Vec::with_capacity(max),
        }
    }

    /// Forward pass returning the pre-sigmoid logit `hᵀ·MLP(input)`.
    pub fn forward_logit(&self, input: &[f64], cache: &mut ForwardCache) -> Result<f64> {
        if input.len() != self.dims[0] {
            return Err(Error::dim("layer 0 input", self.dims[0], input.len()));
        }
        if cache.acts.len() != self.dims.len() {
            *cache = self.new_cache();
        }
        cache.acts[0].copy_from_slice(input);
        Ok(self.forward_cached(cache))
    }

    /// Forward pass on `cache.acts[0]`, which the caller has filled.
    pub(crate) fn forward_cached(&self, cache: &mut ForwardCache) -> f64 {
        for l in 0..self.num_layers() {
            let layer = self.layer(l);
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let x = &before[l];
            let out = &mut after[0];
            for (o, (row, b)) in out
                .iter_mut()
                .zip(layer.weight.chunks_exact(layer.in_dim).zip(layer.bias))
            {
                let z = super::matrix::dot(row, x) + b;
                *o = if z > 0.0 { z } else { 0.0 };
            }
        }
        super::matrix::dot(self.head(), cache.acts.last().unwrap())
    }

    pub(crate) fn input_buffer_mut<'c>(&self, cache: &'c mut ForwardCache) -> &'c mut [f64] {
        if cache.acts.len() != self.dims.len() {
            *cache = self.new_cache();
        }
        &mut cache.acts[0]
    }

    /// Backpropagates `d loss / d logit` through the cached pass.
    ///
    /// Accumulates parameter gradients into `grad` (flat layout) and, when
    /// given, the input gradient into `dinput`.
    pub fn backward(
        &self,
        cache: &mut ForwardCache,
        dlogit: f64,
        grad: &mut [f64],
        dinput: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.num_layers();
        let head_range = self.head_range();
        let last_act = &cache.acts[n_layers];
        for (g, a) in grad[head_range].iter_mut().zip(last_act) {
            *g += dlogit * a;
        }
        cache.delta.clear();
        cache
            .delta
            .extend(self.head().iter().map(|h| dlogit * h));

        for l in (0..n_layers).rev() {
            let layer = self.layer(l);
            let (wr, br) = self.layer_range(l);
            let out_act = &cache.acts[l + 1];
            for (d, a) in cache.delta.iter_mut().zip(out_act) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let x = &cache.acts[l];
            let (gw, gb) = {
                let (left, right) = grad.split_at_mut(br.start);
                (&mut left[wr], &mut right[..br.len()])
            };
            for (o, &d) in cache.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                super::matrix::axpy(d, x, &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim]);
            }
            if l == 0 && dinput.is_none() {
                break;
            }
            cache.delta_prev.clear();
            cache.delta_prev.resize(layer.in_dim, 0.0);
            for (o, &d) in cache.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                super::matrix::axpy(d, row, &mut cache.delta_prev);
            }
            std::mem::swap(&mut cache.delta, &mut cache.delta_prev);
        }
        if let Some(di) = dinput {
            for (o, d) in di.iter_mut().zip(&cache.delta) {
                *o += d;
            }
        }
    }
}

/// Forward pass through `mlp` followed by the sigmoid. Returns the score and
/// the activation cache that [`Mlp::backward`] consumes.
pub fn mlp_forward(input: &[f64], mlp: &Mlp) -> Result<(f64, ForwardCache)> {
    let mut cache = mlp.new_cache();
    let logit = mlp.forward_logit(input, &mut cache)?;
    Ok((sigmoid(logit), cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_scores_one_half() {
        let mlp = Mlp::zeros(&[8, 6, 4, 3]);
        let (s, _) = mlp_forward(&[0.3; 8], &mlp).unwrap();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn single_identity_layer_matches_closed_form() {
        let x = [0.2, 0.7, 1.5];
        let h = [0.5, -0.25, 1.0];
        let w = DenseMatrix::identity(3);
        let mlp = Mlp::from_layers(&[(w, vec![0.0; 3])], &h).unwrap();
        let (s, _) = mlp_forward(&x, &mlp).unwrap();
        let logit: f64 = x.iter().zip(&h).map(|(a, b)| a * b).sum();
        assert!((s - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let w0 = DenseMatrix::zeros(4, 6);
        let w1 = DenseMatrix::zeros(2, 5);
        let err = Mlp::from_layers(&[(w0, vec![0.0; 4]), (w1, vec![0.0; 2])], &[0.0; 2]).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");

        let mlp = Mlp::zeros(&[4, 3]);
        let err = mlp_forward(&[0.0; 5], &mlp).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mlp = Mlp::init(&[6, 5, 4, 3], &mut rng);
        // Shift biases so no ReLU sits near its kink at the test point.
        for l in 0..mlp.num_layers() {
            let (_, b) = mlp.layer_range(l);
            for p in &mut mlp.params_mut()[b] {
                *p = 0.3;
            }
        }
        let input: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let (_, mut cache) = mlp_forward(&input, &mlp).unwrap();
        let mut grad = vec![0.0; mlp.num_params()];
        let mut dinput = vec![0.0; 6];
        let s = sigmoid(mlp.forward_logit(&input, &mut cache).unwrap());
        mlp.backward(&mut cache, s * (1.0 - s), &mut grad, Some(&mut dinput));

        let score = |m: &Mlp, x: &[f64]| mlp_forward(x, m).unwrap().0;
        let h = 1e-4;
        for i in 0..mlp.num_params() {
            let mut p = mlp.clone();
            p.params_mut()[i] += h;
            let mut q = mlp.clone();
            q.params_mut()[i] -= h;
            let fd = (score(&p, &input) - score(&q, &input)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..6 {
            let mut xp = input.clone();
            xp[i] += h;
            let mut xm = input.clone();
            xm[i] -= h;
            let fd = (score(&mlp, &xp) - score(&mlp, &xm)) / (2.0 * h);
            let denom = fd.abs().max(dinput[i].abs()).max(1e-6);
            assert!((fd - dinput[i]).abs() / denom < 1e-4);
        }
    }
}
