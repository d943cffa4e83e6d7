use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FlatParams, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Optimizer hyper-parameters plus moment estimates aligned with a [`FlatParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step_count: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, param_len: usize) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: vec![T::zero(); param_len],
            second_moment: vec![T::zero(); param_len],
        }
    }

    pub fn reset(&mut self) {
        self.step_count = 0;
        self.first_moment.fill(T::zero());
        self.second_moment.fill(T::zero());
    }

    /// One update of `params` in place. A NaN gradient leaves everything untouched.
    pub fn step(&mut self, params: &mut FlatParams<T>, grad: &[T]) -> Result<()> {
        let n = params.len();
        if grad.len() != n || self.first_moment.len() != n || self.second_moment.len() != n {
            return Err(Error::shape(format!(
                "optimizer step: {} params, {} grads, {} moments",
                n,
                grad.len(),
                self.first_moment.len()
            )));
        }
        if let Some(bad) = grad.iter().position(|g| g.is_nan()) {
            let entry = params.manifest().entry_at(bad);
            return Err(Error::Numeric(match entry {
                Some(e) => format!(
                    "NaN gradient at index {bad} (layer {} {:?})",
                    e.layer, e.role
                ),
                None => format!("NaN gradient at index {bad}"),
            }));
        }
        let cfg = self.config;
        let lr = T::of_f64(cfg.learning_rate);
        self.step_count += 1;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.values_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::of_f64(cfg.beta1);
                let b2 = T::of_f64(cfg.beta2);
                let one = T::one();
                let t = self.step_count as i32;
                let c1 = T::of_f64(1.0 - cfg.beta1.powi(t));
                let c2 = T::of_f64(1.0 - cfg.beta2.powi(t));
                let eps = T::of_f64(cfg.epsilon);
                let values = params.values_mut();
                for i in 0..n {
                    let g = grad[i];
                    let m = b1 * self.first_moment[i] + (one - b1) * g;
                    let v = b2 * self.second_moment[i] + (one - b2) * g * g;
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    let m_hat = m / c1;
                    let v_hat = v / c2;
                    values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
