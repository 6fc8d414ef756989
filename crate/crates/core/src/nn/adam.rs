use serde::{Deserialize, Serialize};

use super::{shape_err, NnError};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_count: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: vec![T::zero(); param_count],
            second_moment: vec![T::zero(); param_count],
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), NnError> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n {
            return Err(shape_err(
                format!("{n} parameters and gradients"),
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let b1 = T::c(self.config.beta1);
        let b2 = T::c(self.config.beta2);
        let lr = T::c(self.config.learning_rate);
        let eps = T::c(self.config.epsilon);
        let t = self.step as i32;
        let correction1 = T::one() - b1.powi(t);
        let correction2 = T::one() - b2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut adam = AdamState::<f64>::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        let mut adam = AdamState::<f64>::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0]).unwrap();
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn descends_convex_quadratic_monotonically() {
        let mut adam = AdamState::<f64>::new(1, AdamConfig::default());
        let mut theta = vec![1.0];
        let mut prev = theta[0] * theta[0];
        for _ in 0..10 {
            let g = [2.0 * theta[0]];
            adam.step(&mut theta, &g).unwrap();
            let f = theta[0] * theta[0];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn converges_on_quadratic_within_budget() {
        let mut adam = AdamState::<f64>::new(1, AdamConfig::default());
        let mut theta = vec![1.0];
        let mut reached = None;
        for t in 1..=5000 {
            let g = [2.0 * theta[0]];
            adam.step(&mut theta, &g).unwrap();
            if theta[0].abs() < 1e-2 {
                reached = Some(t);
                break;
            }
        }
        assert!(reached.is_some(), "theta = {}", theta[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = AdamState::<f32>::new(2, AdamConfig::default());
        let mut p = vec![0.0f32; 3];
        assert!(adam.step(&mut p, &[0.0; 3]).is_err());
        assert_eq!(adam.steps_taken(), 0);
    }
}
