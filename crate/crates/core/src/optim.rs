//! Adam optimizer with per-tensor state.
//!
//! State is keyed by parameter name so sparsely updated tensors (the
//! per-image estimators) keep their own moment estimates and step counts.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Default)]
pub struct Adam {
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of `param` against `grad` at learning rate `lr`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) {
        debug_assert_eq!(param.numel(), grad.len());
        let n = grad.len();
        let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        state.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new();
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.data().to_vec();
        for _ in 0..5 {
            adam.step("p", &mut p, &[0.0, 0.0, 0.0], 1e-3);
        }
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (p - 3)^2; gradient 2(p - 3).
        let mut adam = Adam::new();
        let mut p = Tensor::scalar(0.0);
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 3.0);
            adam.step("p", &mut p, &[g], 0.01);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3, "p = {}", p.data()[0]);
    }

    #[test]
    fn per_name_state_is_independent() {
        let mut adam = Adam::new();
        let mut a = Tensor::scalar(0.0);
        let mut b = Tensor::scalar(0.0);
        // Updating a must not warm up b's moments.
        for _ in 0..10 {
            adam.step("a", &mut a, &[1.0], 0.1);
        }
        adam.step("b", &mut b, &[1.0], 0.1);
        // First Adam step with bias correction moves by exactly lr
        // (up to the eps denominator).
        assert!((b.data()[0] + 0.1).abs() < 1e-6, "b = {}", b.data()[0]);
    }
}
