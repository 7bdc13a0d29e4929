//! First-order optimizers over a flat parameter vector with a trainable mask.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
        }
    }

    /// Updates only the indices listed in `trainable`; every other entry of
    /// `params` is left untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], trainable: &[usize]) {
        match self {
            Optimizer::Sgd { lr } => {
                for &i in trainable {
                    params[i] -= *lr * grad[i];
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for &i in trainable {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_entries_untouched() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = vec![1.0, 2.0, 3.0];
            let mut opt = Optimizer::new(kind, 0.1, 3);
            opt.step(&mut p, &[1.0, 1.0, 1.0], &[1]);
            assert_eq!(p[0], 1.0);
            assert_eq!(p[2], 3.0);
            assert!(p[1] < 2.0);
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0];
        Optimizer::new(OptimizerKind::Sgd, 0.5, 1).step(&mut p, &[2.0], &[0]);
        assert_eq!(p, vec![0.0]);
    }
}
