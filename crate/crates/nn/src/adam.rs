//! Adam with bias-corrected moment estimates.

use patchgrid_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }
}

/// One Adam update of `params` in place. The step counter is incremented
/// before the bias corrections are computed.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let grads = grads.tensors();
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NnError::Shape(format!(
            "adam over {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(NnError::Shape(format!("adam shapes {:?} / {:?} / {:?}", p.shape(), g.shape(), m.shape())));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - c.beta1.powi(t);
    let correction2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
    let (one_b1, one_b2) = (T::of_f64(1.0 - c.beta1), T::of_f64(1.0 - c.beta2));
    let (c1, c2) = (T::of_f64(correction1), T::of_f64(correction2));
    let lr = T::of_f64(c.learning_rate);
    let eps = T::of_f64(c.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = scalar(0.3);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        adam_step(&mut [&mut p], &Gradients(vec![scalar(0.0)]), &mut state).unwrap();
        assert_eq!(p.data(), &[0.3]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        adam_step(&mut [&mut p], &Gradients(vec![scalar(0.1)]), &mut state).unwrap();
        // m_hat = 0.1, v_hat = 0.01: update = 1e-3 * 0.1 / (0.1 + 1e-8)
        let expected = -1e-3 * 0.1 / (0.1 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let (lr, b1, b2, eps, g) = (1e-3, 0.9, 0.999, 1e-8, 0.25);
        let mut p = scalar(1.0);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..2 {
            adam_step(&mut [&mut p], &Gradients(vec![scalar(g)]), &mut state).unwrap();
        }
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - f64::powi(b1, t));
            let v_hat = v / (1.0 - f64::powi(b2, t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p.data()[0] - w).abs() < 1e-12);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(adam_step(&mut [&mut p], &Gradients(vec![scalar(1.0)]), &mut state).is_err());
        assert_eq!(state.step, 0);
    }
}
