use serde::{Deserialize, Serialize};

use super::grad::GradientSet;
use super::model::ToyModel;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Updates only tensors whose layer mask allows it; frozen weights are not
/// reachable through the parameter visitor at all.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut ToyModel, grads: &GradientSet) {
        let mut g_all = Vec::new();
        grads.visit(|_, g| g_all.push(g.to_vec()));
        if self.first.is_empty() {
            self.first = g_all.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let (lr, kind, t) = (self.lr, self.kind, self.step);
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params_mut(|_, params, trainable| {
            let g = &g_all[idx];
            if trainable {
                match kind {
                    OptimizerKind::Sgd => {
                        for (p, gv) in params.iter_mut().zip(g) {
                            *p -= lr * gv;
                        }
                    }
                    OptimizerKind::Adam => {
                        let (m, v) = (&mut first[idx], &mut second[idx]);
                        for (j, p) in params.iter_mut().enumerate() {
                            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                            let m_hat = m[j] / bias1;
                            let v_hat = v[j] / bias2;
                            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
            idx += 1;
        });
    }
}
