//! First-order optimizers.

use serde::{Deserialize, Serialize};

use super::model::SegModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const RHO: f32 = 0.9;
const EPS: f32 = 1e-7;

pub(crate) struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies the accumulated gradients, then clears them.
    pub fn apply(&mut self, model: &mut SegModel) {
        self.step += 1;
        let t = self.step;
        let kind = self.kind;
        let lr = self.lr;
        let adam_lr = (lr * (1.0 - BETA2.powi(t)).sqrt() / (1.0 - BETA1.powi(t))) as f32;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params(|p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            match kind {
                OptimizerKind::Adam => {
                    let (b1, b2) = (BETA1 as f32, BETA2 as f32);
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        p.value[i] -= adam_lr * m[i] / (v[i].sqrt() + EPS);
                    }
                }
                OptimizerKind::RmsProp => {
                    let lr = lr as f32;
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        v[i] = RHO * v[i] + (1.0 - RHO) * g * g;
                        p.value[i] -= lr * g / (v[i].sqrt() + EPS);
                    }
                }
            }
            p.zero_grad();
            idx += 1;
        });
    }
}
