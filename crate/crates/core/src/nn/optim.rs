use serde::{Deserialize, Serialize};

use super::network::{Network, ParamGrads};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain momentum-free SGD.
    #[default]
    Sgd,
    /// SGD with 0.9 heavy-ball momentum.
    Momentum,
    Adam,
}

/// First-order optimizer minimizing an objective whose gradient is supplied to `step`.
/// Weight decay adds `weight_decay * theta` to the gradient (L2 regularization).
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    weight_decay: T,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, net: &Network<T>) -> Self {
        let zeros = ParamGrads::zeros_like(net).0;
        Self {
            kind,
            lr: T::lit(lr),
            weight_decay: T::lit(weight_decay),
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &ParamGrads<T>) {
        self.steps += 1;
        let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
        let bias1 = T::one() - b1.powi(self.steps);
        let bias2 = T::one() - b2.powi(self.steps);
        for (li, params) in net.layer_params_mut().enumerate() {
            let g = &grads.0[li];
            let m = &mut self.first[li];
            let v = &mut self.second[li];
            for (k, p) in params.iter_mut().enumerate() {
                let gk = g[k] + self.weight_decay * *p;
                match self.kind {
                    OptimizerKind::Sgd => *p -= self.lr * gk,
                    OptimizerKind::Momentum => {
                        m[k] = b1 * m[k] + gk;
                        *p -= self.lr * m[k];
                    }
                    OptimizerKind::Adam => {
                        m[k] = b1 * m[k] + (T::one() - b1) * gk;
                        v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                        let mh = m[k] / bias1;
                        let vh = v[k] / bias2;
                        *p -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
