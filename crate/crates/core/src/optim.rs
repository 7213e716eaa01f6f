//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
                Optimizer::Adam {
                    lr,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, value: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = value,
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        match self {
            Optimizer::Sgd { lr } => {
                for (id, g) in grads.iter() {
                    for (p, d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= *lr * d;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (id, g) in grads.iter() {
                    let i = id.index();
                    let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
                    let p = store.get_mut(id).data_mut();
                    for k in 0..p.len() {
                        let d = g.data()[k];
                        mi[k] = *beta1 * mi[k] + (1.0 - *beta1) * d;
                        vi[k] = *beta2 * vi[k] + (1.0 - *beta2) * d * d;
                        let mh = mi[k] / c1;
                        let vh = vi[k] / c2;
                        p[k] -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
