//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
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
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Clears moment estimates.
    pub fn reset(&mut self) {
        if let Optimizer::Adam { t, m, v, .. } = self {
            *t = 0;
            m.clear();
            v.clear();
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "optimizer step sizes");
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= *lr * g;
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
                m.resize(params.len(), 0.0);
                v.resize(params.len(), 0.0);
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    params[i] -= *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0, -2.0];
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut p, &[10.0, -10.0]);
        assert_eq!(p, vec![0.0, -1.0]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        opt.step(&mut p, &[3.0, -1e-3, 0.0]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-7);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic_and_resets() {
        let mut p = vec![5.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
        opt.reset();
        let mut q = vec![0.0];
        opt.step(&mut q, &[1.0]);
        assert!((q[0] + 0.1).abs() < 1e-9);
    }
}
