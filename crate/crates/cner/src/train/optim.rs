//! Per-step optimizers over named model weights.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::model::ModelCheckpoint;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent; useful for single-step oracles.
    Sgd,
    /// First/second-moment adaptive updates (beta1 0.9, beta2 0.999, eps 1e-8).
    #[default]
    Adam,
}

#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    first_moment: IndexMap<String, Vec<f64>>,
    second_moment: IndexMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }

    /// Applies one update from accumulated gradients, keyed by weight name.
    pub fn apply(&mut self, model: &mut ModelCheckpoint, grads: &IndexMap<String, Vec<f64>>) {
        self.step_count += 1;
        for (name, grad) in grads {
            let weight = model
                .named_weights
                .get_mut(name)
                .expect("gradient for unknown weight");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in weight.data.iter_mut().zip(grad) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    let v = self
                        .second_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    let bias1 = 1.0 - ADAM_BETA1.powi(self.step_count as i32);
                    let bias2 = 1.0 - ADAM_BETA2.powi(self.step_count as i32);
                    for i in 0..grad.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        weight.data[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
