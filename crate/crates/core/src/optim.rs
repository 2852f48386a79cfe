//! Stochastic gradient descent with classical momentum and coupled L2
//! weight decay:
//!
//! ```text
//! d = g + weight_decay * θ
//! v = momentum * v + d
//! θ = θ - lr * v
//! ```

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update. `params` and `grads` must line up and keep the
    /// same order and shapes across calls.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.shape(), g.shape());
            for ((w, &dw), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = dw + weight_decay * *w;
                *vel = momentum * *vel + d;
                *w -= learning_rate * *vel;
            }
        }
    }
}
