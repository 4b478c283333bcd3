use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Module;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
    },
}

impl OptimizerKind {
    /// Adam with `eps = 1e-5` (instead of the usual `1e-8`) for stability.
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, model: &mut dyn Module, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let kind = self.kind;
        let state = &mut self.state;
        let mut shape_err = None;
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.get(&p.name) else { return };
            if g.shape() != p.value.shape() {
                shape_err.get_or_insert_with(|| Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
                return;
            }
            let mom = state.entry(p.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.numel()],
                second: vec![0.0; g.numel()],
            });
            match kind {
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, &g), m), v) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&mut mom.first)
                        .zip(&mut mom.second)
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { lr, momentum } => {
                    for ((w, &g), m) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&mut mom.first)
                    {
                        *m = momentum * *m + g;
                        *w -= lr * *m;
                    }
                }
            }
        });
        shape_err.map_or(Ok(()), Err)
    }
}
