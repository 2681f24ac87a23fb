use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// `v ← m·v + g + wd·θ; θ ← θ − lr·v`
    Sgd { momentum: f64, weight_decay: f64 },
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
            } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("momentum", "must lie in [0, 1)"));
                }
                if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
                    return Err(Error::config("weight_decay", "must be >= 0"));
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config("beta", "betas must lie in [0, 1)"));
                }
                if eps <= 0.0 {
                    return Err(Error::config("eps", "must be > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    /// Velocity (SGD) or first moment (Adam).
    first: Vec<Tensor>,
    /// Second moment; empty for SGD.
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        OptimizerState {
            kind,
            first: zeros(),
            second,
            step: 0,
        }
    }

    pub(crate) fn from_parts(kind: OptimizerKind, first: Vec<Tensor>, second: Vec<Tensor>, step: u64) -> Result<Self> {
        let expected_second = match kind {
            OptimizerKind::Adam { .. } => first.len(),
            OptimizerKind::Sgd { .. } => 0,
        };
        if second.len() != expected_second {
            return Err(Error::contract("optimizer buffer count does not match its kind"));
        }
        Ok(OptimizerState {
            kind,
            first,
            second,
            step,
        })
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.check_same_shape(g, "optimizer_step")?;
            p.check_same_shape(m, "optimizer_step")?;
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
            } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = momentum * *vi + gi + weight_decay * *theta;
                        *theta -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((theta, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    fn sgd(momentum: f64, weight_decay: f64) -> OptimizerKind {
        OptimizerKind::Sgd {
            momentum,
            weight_decay,
        }
    }

    #[test]
    fn plain_descent() {
        let mut p = one(1.0);
        let mut s = OptimizerState::new(sgd(0.0, 0.0), &p);
        s.step(&mut p, &one(0.5), 0.1).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = one(1.0);
        let mut s = OptimizerState::new(sgd(0.0, 5e-4), &p);
        s.step(&mut p, &one(0.0), 0.1).unwrap();
        assert!((p[0].data()[0] - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = one(0.0);
        let mut s = OptimizerState::new(sgd(0.9, 0.0), &p);
        s.step(&mut p, &one(1.0), 1.0).unwrap();
        s.step(&mut p, &one(1.0), 1.0).unwrap();
        // v1 = 1, v2 = 1.9; θ = -(1 + 1.9)
        assert!((p[0].data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one(1.0);
        let mut s = OptimizerState::new(OptimizerKind::adam_default(), &p);
        s.step(&mut p, &one(0.5), 1e-3).unwrap();
        // m̂ = 0.5, v̂ = 0.25, update = lr·0.5/(0.5 + 1e-8)
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!(((1.0 - p[0].data()[0]) - 1e-3).abs() < 1e-10);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = one(1.0);
        let mut s = OptimizerState::new(sgd(0.0, 0.0), &p);
        let g = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        assert!(matches!(s.step(&mut p, &g, 0.1), Err(Error::Dimension { .. })));
    }
}
