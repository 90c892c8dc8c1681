use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Adam moments for one parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != self.len() {
            return Err(Error::dim("adam param", self.len(), param.len()));
        }
        if grad.len() != self.len() {
            return Err(Error::dim("adam grad", self.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adam gradient".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    state.step(param, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar reference written independently of the vectorized loop.
    fn scalar_adam(p: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut p) = (0.0, 0.0, p);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = vec![0.5, -1.0, 2.0];
        let mut s = AdamState::new(3, 0.001);
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0; 4];
        let mut s = AdamState::new(4, 0.001);
        s.epsilon = 0.0;
        s.step(&mut p, &[3.0, -0.2, 1e-3, -50.0]).unwrap();
        let expect = [-0.001, 0.001, -0.001, 0.001];
        for (a, e) in p.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let g1 = [0.3, -1.2, 0.0, 4.0];
        let g2 = [-0.1, -0.8, 2.0, 4.0];
        let init = [0.1, 0.2, -0.3, 0.4];
        let mut p = init.to_vec();
        let mut s = AdamState::new(4, 0.001);
        s.step(&mut p, &g1).unwrap();
        s.step(&mut p, &g2).unwrap();
        for i in 0..4 {
            let r = scalar_adam(init[i], &[g1[i], g2[i]], 0.001);
            assert_eq!(p[i].to_bits(), r.to_bits(), "entry {i}");
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(2, 0.001);
        assert!(s.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut p = vec![0.3, 0.1];
            let mut s = AdamState::new(2, 0.01);
            for k in 0..5 {
                s.step(&mut p, &[k as f64 * 0.1 - 0.2, 0.7]).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
