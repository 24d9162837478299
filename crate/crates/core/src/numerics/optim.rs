use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First-order optimizer with per-parameter state keyed by name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Optimizer {
            kind,
            lr,
            slots: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, lr)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update to `param` in place.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
            ));
        }
        let n = param.len();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        slot.t += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut slot.m) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(slot.t as i32);
                let bc2 = 1.0 - beta2.powi(slot.t as i32);
                for (((p, g), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(&mut slot.m)
                    .zip(&mut slot.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        param.ensure_finite("optimizer_step")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut opt = Optimizer::sgd(0.1, 0.0);
        let mut p = Tensor::scalar(3.0);
        opt.step("p", &mut p, &Tensor::scalar(6.0)).unwrap();
        assert!((p.item().unwrap() - 2.4).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        for mut opt in [Optimizer::sgd(0.1, 0.9), Optimizer::adam(0.1)] {
            let mut p = Tensor::from_vec(vec![1.0, -2.0]);
            opt.step("p", &mut p, &Tensor::zeros(&[2])).unwrap();
            assert_eq!(p.data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        // m = 0.6, v = 0.036; bias-corrected: mhat = 6, vhat = 36, step = lr * 6 / (6 + eps).
        let mut opt = Optimizer::adam(0.1);
        let mut p = Tensor::scalar(3.0);
        opt.step("p", &mut p, &Tensor::scalar(6.0)).unwrap();
        let expect = 3.0 - 0.1 * 6.0 / (6.0 + 1e-8);
        assert!((p.item().unwrap() - expect).abs() < 1e-12);
        assert!((3.0 - p.item().unwrap() - 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = Optimizer::adam(0.1);
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.step("p", &mut p, &Tensor::zeros(&[3])).is_err());
    }
}
