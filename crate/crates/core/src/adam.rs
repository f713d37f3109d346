//! Adam with bias correction, operating on a fixed ordered parameter list.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix], cfg: AdamConfig) -> AdamState {
        AdamState {
            cfg,
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over the whole parameter list. `grads[i] = None` means an
    /// exactly-zero gradient for that parameter.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, optimizer tracks {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let zero;
            let g = match &grads[i] {
                Some(g) => {
                    if g.shape() != params[i].shape() {
                        return Err(CoreError::ShapeMismatch {
                            op: "adam_step",
                            detail: format!(
                                "param {} is {:?}, grad is {:?}",
                                i,
                                params[i].shape(),
                                g.shape()
                            ),
                        });
                    }
                    g
                }
                None => {
                    zero = Matrix::zeros(params[i].rows(), params[i].cols());
                    &zero
                }
            };
            g.check_finite("adam_step")?;
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params[i];
            for j in 0..g.data().len() {
                let gj = g.data()[j];
                let mj = b1 * m.data()[j] + (1.0 - b1) * gj;
                let vj = b2 * v.data()[j] + (1.0 - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / b1t;
                let v_hat = vj / b2t;
                p.data_mut()[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            p.check_finite("adam_step")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_nearly_lr() {
        // With g = 1, m_hat = 1, v_hat = 1: delta = -lr / (1 + eps).
        let mut params = vec![Matrix::filled(1, 1, 0.0)];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params, &[Some(Matrix::filled(1, 1, 1.0))]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((params[0][(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params_unchanged() {
        let mut params = vec![Matrix::filled(2, 2, 0.7)];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params, &[None]).unwrap();
        assert_eq!(params[0], Matrix::filled(2, 2, 0.7));
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = (x - 3)^2 from x = 0.
        let mut params = vec![Matrix::filled(1, 1, 0.0)];
        let mut adam = AdamState::new(&params, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..200 {
            let x = params[0][(0, 0)];
            let g = Matrix::filled(1, 1, 2.0 * (x - 3.0));
            adam.step(&mut params, &[Some(g)]).unwrap();
        }
        assert!((params[0][(0, 0)] - 3.0).abs() < 0.1);
    }

    #[test]
    fn rejects_mismatched_grad_shape() {
        let mut params = vec![Matrix::zeros(2, 2)];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let bad = Some(Matrix::zeros(1, 4));
        assert!(adam.step(&mut params, &[bad]).is_err());
    }
}
