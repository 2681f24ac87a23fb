//! l∞-bounded first-order adversaries.
//!
//! PGD iterates `x_{t+1} = Π(x_t + α·sign(∇ₓL(θ, x_t, y)))` where `Π` clips
//! into the ε-ball around the clean input intersected with the valid value
//! range. FGSM is the single step `Π(x + ε·sign(∇ₓL(θ, x, y)))`.
//!
//! Gradients are taken of the *summed* per-row loss, so row `i` of the input
//! gradient depends only on row `i` of the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy_per_sample, Batch, Model, Wrt};
use crate::rng::{derive_seed, rng_from};
use crate::tape::Reduction;
use crate::tensor::{sign, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Zero,
    /// Uniform in the ε-ball, drawn per row from `derive_seed(seed, row)`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Step size; `2.5·ε/steps` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_init")]
    pub init: InitMode,
    #[serde(default = "default_clamp")]
    pub clamp: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

fn default_init() -> InitMode {
    InitMode::Zero
}

fn default_clamp() -> [f64; 2] {
    [0.0, 1.0]
}

impl AttackConfig {
    /// PGD-`steps` with the default step size and zero init.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            alpha: None,
            steps,
            init: InitMode::Zero,
            clamp: default_clamp(),
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            alpha: Some(epsilon),
            ..Self::pgd(epsilon, 1)
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_init(mut self, init: InitMode) -> Self {
        self.init = init;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.alpha
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be finite and >= 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if let Some(a) = self.alpha {
            // α = 0 only makes sense for the degenerate ε = 0 ball.
            if !(a.is_finite() && (a > 0.0 || (a == 0.0 && self.epsilon == 0.0))) {
                return Err(Error::config("alpha", "must be finite and > 0"));
            }
        }
        if self.clamp.iter().any(|c| c.is_nan()) || self.clamp[0] >= self.clamp[1] {
            return Err(Error::config("clamp", "lower bound must be below upper bound"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub delta: Tensor,
    /// Cross-entropy of each row at `x_adv`.
    pub losses: Vec<f64>,
}

/// Clips `candidate` into `[origin − ε, origin + ε] ∩ clamp`.
pub fn project_linf(candidate: &Tensor, origin: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    candidate.check_same_shape(origin, "project_linf")?;
    let mut out = candidate.clone();
    project_in_place(out.data_mut(), origin.data(), cfg.epsilon, cfg.clamp);
    Ok(out)
}

fn project_in_place(values: &mut [f64], origin: &[f64], eps: f64, clamp: [f64; 2]) {
    for (v, &o) in values.iter_mut().zip(origin) {
        *v = v.max(o - eps).min(o + eps).max(clamp[0]).min(clamp[1]);
    }
}

fn check_batch(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    let (_, d) = batch.x().dims2()?;
    if d != model.input_dim() {
        return Err(Error::Dimension {
            op: "attack",
            left: batch.x().shape().to_vec(),
            right: vec![model.input_dim()],
        });
    }
    if batch
        .x()
        .data()
        .iter()
        .any(|v| *v < cfg.clamp[0] || *v > cfg.clamp[1])
    {
        return Err(Error::contract("batch lies outside the attack clamp range"));
    }
    Ok(())
}

fn input_gradient(model: &Model, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let g = model.loss_and_grad(
        x,
        y,
        Reduction::Sum,
        Wrt {
            params: false,
            input: true,
        },
    )?;
    Ok(g.input_grad.expect("input gradient requested"))
}

fn finish(model: &Model, x: &Tensor, x_adv: Tensor, y: &[usize]) -> Result<AttackResult> {
    let delta = x_adv.sub(x)?;
    let losses = cross_entropy_per_sample(&model.forward(&x_adv)?, y)?;
    Ok(AttackResult { x_adv, delta, losses })
}

/// Single signed-gradient step of size ε.
pub fn fgsm(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    check_batch(model, batch, cfg)?;
    let x = batch.x();
    let grad = input_gradient(model, x, batch.y())?;
    let mut x_adv = x.clone();
    for (v, g) in x_adv.data_mut().iter_mut().zip(grad.data()) {
        *v += cfg.epsilon * sign(*g);
    }
    project_in_place(x_adv.data_mut(), x.data(), cfg.epsilon, cfg.clamp);
    finish(model, x, x_adv, batch.y())
}

/// Projected gradient ascent with `cfg.steps` iterations.
pub fn pgd(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<AttackResult> {
    pgd_from_row(model, batch, cfg, 0)
}

/// PGD where row `i` of `batch` is global row `row_offset + i` for the
/// purpose of deriving its random-init stream, so chunked evaluation gives
/// the same perturbations as a single call on the whole dataset.
pub(crate) fn pgd_from_row(model: &Model, batch: &Batch, cfg: &AttackConfig, row_offset: usize) -> Result<AttackResult> {
    check_batch(model, batch, cfg)?;
    let x = batch.x();
    let (rows, d) = x.dims2()?;
    let eps = cfg.epsilon;
    let alpha = cfg.step_size();

    let mut x_adv = x.clone();
    if cfg.init == InitMode::Uniform && eps > 0.0 {
        for r in 0..rows {
            let mut rng = rng_from(derive_seed(cfg.seed, (row_offset + r) as u64));
            for v in &mut x_adv.data_mut()[r * d..(r + 1) * d] {
                *v += rng.gen_range(-eps..=eps);
            }
        }
        project_in_place(x_adv.data_mut(), x.data(), eps, cfg.clamp);
    }

    for _ in 0..cfg.steps {
        let grad = input_gradient(model, &x_adv, batch.y())?;
        for (v, g) in x_adv.data_mut().iter_mut().zip(grad.data()) {
            *v += alpha * sign(*g);
        }
        project_in_place(x_adv.data_mut(), x.data(), eps, cfg.clamp);
    }
    finish(model, x, x_adv, batch.y())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let cfg = AttackConfig::pgd(0.3, 1);
        assert!((project_linf(&t(&[0.9]), &t(&[0.5]), &cfg).unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(project_linf(&t(&[0.6]), &t(&[0.5]), &cfg).unwrap().data(), &[0.6]);
        assert_eq!(project_linf(&t(&[1.2]), &t(&[0.95]), &cfg).unwrap().data(), &[1.0]);
    }

    #[test]
    fn projection_shape_mismatch() {
        let cfg = AttackConfig::pgd(0.3, 1);
        assert!(matches!(
            project_linf(&t(&[0.1, 0.2]), &t(&[0.1]), &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_gradient_model_leaves_input_unchanged() {
        let model = Model::zeros(Architecture::mlp(3, &[4], 2)).unwrap();
        let batch = Batch::new(t(&[0.2, 0.4, 0.6]), vec![1]).unwrap();
        let r = fgsm(&model, &batch, &AttackConfig::fgsm(0.1)).unwrap();
        assert_eq!(r.x_adv, *batch.x());
        assert!(r.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let model = Model::he_uniform(Architecture::mlp(3, &[4], 2), 9).unwrap();
        let batch = Batch::new(t(&[0.2, 0.4, 0.6]), vec![0]).unwrap();
        let cfg = AttackConfig::pgd(0.0, 7).with_alpha(0.05).with_init(InitMode::Uniform);
        assert_eq!(pgd(&model, &batch, &cfg).unwrap().x_adv, *batch.x());
        assert_eq!(fgsm(&model, &batch, &AttackConfig::fgsm(0.0)).unwrap().x_adv, *batch.x());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttackConfig::pgd(-0.1, 1).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 1).with_alpha(0.0).validate().is_err());
        let mut cfg = AttackConfig::pgd(0.1, 1);
        cfg.clamp = [1.0, 1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_step_size() {
        assert!((AttackConfig::pgd(0.1, 10).step_size() - 0.025).abs() < 1e-15);
        assert_eq!(AttackConfig::fgsm(0.1).step_size(), 0.1);
    }
}
