use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f64> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Restores state saved from an earlier run.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Contract("moment buffers disagree".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update to every tensor that carries a gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: vec![self.first.len()],
                rhs: vec![params.len()],
            });
        }
        for (i, p) in params.iter().enumerate() {
            if self.first[i].len() != p.len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: vec![self.first[i].len()],
                    rhs: p.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let (lr, b1, b2, eps, wd) = (
            T::lit(c.lr),
            T::lit(c.beta1),
            T::lit(c.beta2),
            T::lit(c.eps),
            T::lit(c.weight_decay),
        );
        let t = self.step as i32;
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                *x = *x - lr * wd * *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
