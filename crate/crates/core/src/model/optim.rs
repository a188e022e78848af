// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::Real;

/// Inverse-square-root schedule with linear warmup, scaled by `d^-0.5`.
/// `step` is 1-based.
pub fn learning_rate(step: u64, d_model: usize, lr_scale: f64, warmup: u64) -> f64 {
    if lr_scale == 0.0 {
        return 0.0;
    }
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    lr_scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> AdamState<T> {
        AdamState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64, hyper: &AdamHyper) {
        self.t += 1;
        let b1 = T::of(hyper.beta1);
        let b2 = T::of(hyper.beta2);
        let one = T::one();
        let c1 = T::of(1.0 / (1.0 - hyper.beta1.powf(self.t as f64)));
        let c2 = T::of(1.0 / (1.0 - hyper.beta2.powf(self.t as f64)));
        let lr = T::of(lr);
        let eps = T::of(hyper.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m * c1;
            let vhat = *v * c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let peak = learning_rate(400, 64, 1.0, 400);
        assert!(learning_rate(399, 64, 1.0, 400) < peak);
        assert!(learning_rate(401, 64, 1.0, 400) < peak);
        assert!((peak - 64f64.powf(-0.5) * 400f64.powf(-0.5)).abs() < 1e-15);
        assert_eq!(learning_rate(10, 64, 0.0, 400), 0.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1f64];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let mut p = vec![0.5f32, -1.25, 3.0];
        let before = p.clone();
        let mut st = AdamState::new(3);
        st.update(&mut p, &[1.0, -2.0, 0.5], 0.0, &AdamHyper::default());
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut p = vec![0.0f64, 0.0];
        let mut st = AdamState::new(2);
        st.update(&mut p, &[2.0, -0.5], 0.01, &AdamHyper::default());
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }
}
