//! First-order optimizers over a [`ParamStore`].

use std::str::FromStr;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

/// Optimizer with per-parameter first and second moment estimates (the
/// moments stay zero for SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", config.lr)));
        }
        if config.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be > 0".into()));
        }
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract("optimizer state does not match the parameter store"));
        }
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let scale = match self.config.clip_norm {
            Some(c) => {
                let norm = store.grad_norm();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let ids: Vec<_> = store.ids().collect();
        match c.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let p = store.get_mut(id);
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= c.lr * g * scale;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for id in ids {
                    let i = id.index();
                    let p = store.get_mut(id);
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                        let g = g * scale;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
