//! First-order optimizers over the flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Weight decay is decoupled: every step first scales the
/// parameters by `1 − lr·wd`, then applies the gradient update.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, len: usize) -> Self {
        let moments = matches!(kind, OptimizerKind::AdamW { .. });
        Self {
            kind,
            weight_decay,
            m: if moments { vec![0.0; len] } else { Vec::new() },
            v: if moments { vec![0.0; len] } else { Vec::new() },
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_shape("optimizer gradient", &[params.len()], &[grads.len()])?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                step: self.step as usize,
            });
        }
        self.step += 1;
        let decay = 1.0 - lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = *p * decay - lr * g;
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                check_shape("optimizer state", &[params.len()], &[self.m.len()])?;
                let n = self.step as i32;
                let bc1 = 1.0 - beta1.powi(n);
                let bc2 = 1.0 - beta2.powi(n);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then constant.
pub fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
            let mut opt = Optimizer::new(kind, 0.0, 3);
            let mut p = vec![1.0, -2.0, 0.5];
            opt.step(&mut p, &[0.0; 3], 1e-3).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn scalar_adamw_first_step_by_hand() {
        let (lr, wd, g, p0) = (5e-4, 0.01, 0.3, 2.0);
        let mut opt = Optimizer::new(OptimizerKind::default(), wd, 1);
        let mut p = vec![p0];
        opt.step(&mut p, &[g], lr).unwrap();
        // m = 0.1·g, v = 0.001·g², bias corrections give m̂ = g, v̂ = g².
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expect = p0 * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - (p0 - lr * wd * p0 - lr * g / (g + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_by_factor() {
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, 2);
        let mut p = vec![3.0, -1.0];
        opt.step(&mut p, &[0.0, 0.0], 5e-4).unwrap();
        let f = 1.0 - 5e-4 * 0.01;
        assert!((p[0] - 3.0 * f).abs() < 1e-15);
        assert!((p[1] + f).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, 2);
        let mut p = vec![0.0, 0.0];
        let err = opt.step(&mut p, &[0.0, f64::NAN], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }));
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(warmup_lr(1.0, 0, 4), 0.25);
        assert_eq!(warmup_lr(1.0, 3, 4), 1.0);
        assert_eq!(warmup_lr(1.0, 10, 4), 1.0);
        assert_eq!(warmup_lr(1.0, 0, 0), 1.0);
    }
}
