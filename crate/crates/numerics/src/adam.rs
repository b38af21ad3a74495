//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::params::{Grads, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(like: &Tensor, config: AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros_like(like),
            second_moment: Tensor::zeros_like(like),
            step_count: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `name` is only used to label a non-finite gradient error.
pub fn adam_step(
    name: &str,
    params: &mut Tensor,
    grads: &Tensor,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.first_moment.shape() {
        return Err(NumericsError::Dimension {
            op: "adam_step",
            lhs: params.shape().to_vec(),
            rhs: grads.shape().to_vec(),
        });
    }
    if !(lr > 0.0) {
        return Err(NumericsError::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if !grads.is_finite() {
        return Err(NumericsError::NonFiniteGradient {
            name: name.to_string(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in params.data_mut().iter_mut().zip(grads.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every parameter of a model, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_config(lr, AdamConfig::default())
    }

    pub fn with_config(lr: f64, config: AdamConfig) -> Self {
        Self {
            lr,
            config,
            states: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters missing from `grads` get a zero gradient.
    pub fn step(&mut self, model: &mut dyn Parameterized, grads: &Grads) -> Result<()> {
        let mut status = Ok(());
        let lr = self.lr;
        let config = self.config;
        let states = &mut self.states;
        model.visit_mut(&mut |name, param| {
            if status.is_err() {
                return;
            }
            let state = states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::new(param, config));
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros_like(param);
                    &zero
                }
            };
            status = adam_step(name, param, g, state, lr);
        });
        status
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let g = Tensor::zeros_like(&p);
        let mut s = AdamState::new(&p, AdamConfig::default());
        for step in 1..=5 {
            adam_step("p", &mut p, &g, &mut s, 1e-3).unwrap();
            assert_eq!(s.step_count, step);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g² on the first step, so the update is lr·g/(|g|+ε).
        let mut p = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![2.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step("p", &mut p, &g, &mut s, 0.001).unwrap();
        let expected = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![f64::NAN]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let err = adam_step("crf.transitions", &mut p, &g, &mut s, 0.001).unwrap_err();
        assert_eq!(
            err,
            NumericsError::NonFiniteGradient {
                name: "crf.transitions".into()
            }
        );
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.7]);
            let mut s = AdamState::new(&p, AdamConfig::default());
            for i in 0..50 {
                let g = Tensor::vector(vec![(i as f64).sin(), p.data()[0] * 0.5]);
                adam_step("p", &mut p, &g, &mut s, 1e-3).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(adam_step("p", &mut p, &g, &mut s, 0.0).is_err());
    }
}
