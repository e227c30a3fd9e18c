//! Adam with coupled weight decay.
//!
//! Decay folds into the gradient (`g + wd * p`) before the moment updates,
//! then the usual bias-corrected first and second moments drive the step.

use thiserror::Error;

use crate::element::Element;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("optimizer config: {0}")]
    InvalidHyper(String),
    #[error("slot {slot} out of range ({slots} slots)")]
    BadSlot { slot: usize, slots: usize },
    #[error("slot {slot}: param has {param} values, grad has {grad}, state has {state}")]
    SizeMismatch {
        slot: usize,
        param: usize,
        grad: usize,
        state: usize,
    },
    #[error("update called before begin_step")]
    NoStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |msg: String| Err(OptimError::InvalidHyper(msg));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be finite and > 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Adam<T: Element> {
    hyper: OptimHyper,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    /// One slot per parameter tensor, sized to its element count.
    pub fn new(hyper: OptimHyper, sizes: &[usize]) -> Result<Self, OptimError> {
        hyper.validate()?;
        let m = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        let v = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        Ok(Adam { hyper, step: 0, m, v })
    }

    pub fn hyper(&self) -> &OptimHyper {
        &self.hyper
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per batch, before the
    /// per-slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T]) -> Result<(), OptimError> {
        if self.step == 0 {
            return Err(OptimError::NoStep);
        }
        if slot >= self.m.len() {
            return Err(OptimError::BadSlot { slot, slots: self.m.len() });
        }
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        if param.len() != grad.len() || param.len() != m.len() {
            return Err(OptimError::SizeMismatch {
                slot,
                param: param.len(),
                grad: grad.len(),
                state: m.len(),
            });
        }

        let lr = T::from_f64(self.hyper.learning_rate);
        let wd = T::from_f64(self.hyper.weight_decay);
        let b1 = T::from_f64(self.hyper.beta1);
        let b2 = T::from_f64(self.hyper.beta2);
        let eps = T::from_f64(self.hyper.epsilon);
        let one = T::one();
        let t = self.step as i32;
        let corr1 = T::from_f64(1.0 - self.hyper.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.hyper.beta2.powi(t));

        for i in 0..param.len() {
            let g = grad[i] + wd * param[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
