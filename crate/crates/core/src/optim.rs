//! Adam and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::tape::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64, cfg: AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, param, grad) in store.param_and_grad_mut() {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(p));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.accumulate_grad("w", &Tensor::scalar(-3.7), 1.0).unwrap();
        let mut st = OptimizerState::new();
        adam_step(&mut s, &mut st, 0.01, AdamConfig::default());
        assert!((s.get("w").unwrap().item() - 1.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.4);
        let mut st = OptimizerState::new();
        adam_step(&mut s, &mut st, 0.1, AdamConfig::default());
        assert_eq!(s.get("w").unwrap().item(), 0.4);
    }

    #[test]
    fn three_step_trace() {
        // Hand-rolled reference with gradients 1, -2, 0.5.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut s = scalar_store(0.0);
        let mut st = OptimizerState::new();
        for (k, g) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (k + 1) as i32;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            s.zero_grad();
            s.accumulate_grad("w", &Tensor::scalar(g), 1.0).unwrap();
            adam_step(&mut s, &mut st, lr, AdamConfig::default());
            assert!((s.get("w").unwrap().item() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2, 1]));
        s.accumulate_grad("a", &Tensor::column(vec![3.0, 4.0]), 1.0).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut s, 10.0), s.grad_norm());
    }
}
