//! Natural training, PGD adversarial training, and adversarial fine-tuning.
//!
//! All three share one epoch loop. With an attack configured, every batch is
//! replaced by its PGD perturbation under the *current* parameters before
//! the optimizer step (inner maximisation, then outer minimisation).

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsRow};
use crate::model::{Batch, Model, Wrt};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::derive_seed;
use crate::schedule::ScheduleSpec;
use crate::tape::Reduction;
use crate::tensor::Tensor;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerKind,
    /// Training-time adversary; `None` means natural training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    /// Adversary used for the per-epoch robust accuracy columns.
    pub eval_attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Leading fraction of each batch kept clean during adversarial training.
    #[serde(default)]
    pub clean_fraction: f64,
    /// Evaluate train-split metrics on only the first N training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_train_limit: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(Error::config("clean_fraction", "must lie in [0, 1]"));
        }
        if self.eval_train_limit == Some(0) {
            return Err(Error::config("eval_train_limit", "must be >= 1"));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.eval_attack.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }
}

/// Adversarial fine-tuning of an existing model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(default = "FinetuneConfig::default_epochs")]
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "ScheduleSpec::ssfd_default")]
    pub schedule: ScheduleSpec,
    #[serde(default = "OptimizerKind::adam_default")]
    pub optimizer: OptimizerKind,
    pub attack: AttackConfig,
    pub eval_attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    #[serde(default)]
    pub clean_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_train_limit: Option<usize>,
}

impl FinetuneConfig {
    fn default_epochs() -> usize {
        10
    }

    /// Ten epochs of Adam under the default slow-start/fast-decay schedule.
    pub fn new(attack: AttackConfig, eval_attack: AttackConfig, batch_size: usize) -> Self {
        FinetuneConfig {
            epochs: Self::default_epochs(),
            batch_size,
            schedule: ScheduleSpec::ssfd_default(),
            optimizer: OptimizerKind::adam_default(),
            attack,
            eval_attack,
            seed: 0,
            shuffle: true,
            clean_fraction: 0.0,
            eval_train_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.schedule.horizon() {
            if h < self.epochs {
                return Err(Error::config(
                    "schedule",
                    format!("schedule horizon {h} is shorter than {} epochs", self.epochs),
                ));
            }
        }
        if self.epochs == 0 {
            return self.schedule.validate();
        }
        self.as_train_config().validate()
    }

    fn as_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            attack: Some(self.attack.clone()),
            eval_attack: self.eval_attack.clone(),
            seed: self.seed,
            shuffle: self.shuffle,
            clean_fraction: self.clean_fraction,
            eval_train_limit: self.eval_train_limit,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    /// Time spent in attack + optimizer steps.
    pub train: Duration,
    /// Time spent computing per-epoch metrics.
    pub eval: Duration,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricsRow>,
    pub timing: Timing,
}

/// Natural (non-adversarial) training.
pub fn pretrain(model: &Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.attack.is_some() {
        return Err(Error::config("attack", "pretraining uses natural samples only"));
    }
    run(model, train, test, cfg)
}

/// PGD adversarial training: min over θ of the loss at the PGD maximiser.
pub fn adversarial_train(model: &Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.attack.is_none() {
        return Err(Error::config("attack", "adversarial training needs an attack"));
    }
    run(model, train, test, cfg)
}

/// Short adversarial fine-tune of an arbitrary pre-trained model.
pub fn adversarial_finetune(
    pretrained: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainReport {
            model: pretrained.clone(),
            optimizer: OptimizerState::new(cfg.optimizer.clone(), pretrained.params()),
            metrics: Vec::new(),
            timing: Timing::default(),
        });
    }
    run(pretrained, train, test, &cfg.as_train_config())
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension {
            op: "train",
            left: vec![data.len(), data.dim()],
            right: vec![model.input_dim()],
        });
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes but the model only {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn adversarial_batch(model: &Model, batch: &Batch, attack: &AttackConfig, clean_fraction: f64) -> Result<Tensor> {
    let clean_rows = (clean_fraction * batch.len() as f64).round() as usize;
    if clean_rows == 0 {
        return Ok(pgd(model, batch, attack)?.x_adv);
    }
    if clean_rows >= batch.len() {
        return Ok(batch.x().clone());
    }
    let d = batch.x().shape()[1];
    let tail: Vec<usize> = (clean_rows..batch.len()).collect();
    let sub = Batch::new(batch.x().select_rows(&tail)?, batch.y()[clean_rows..].to_vec())?;
    let adv = pgd(model, &sub, attack)?.x_adv;
    let mut x = batch.x().clone();
    x.data_mut()[clean_rows * d..].copy_from_slice(adv.data());
    Ok(x)
}

fn run(initial: &Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(initial, train)?;
    check_data(initial, test)?;
    let mut model = initial.clone();
    let mut optimizer = OptimizerState::new(cfg.optimizer.clone(), model.params());
    let train_eval = match cfg.eval_train_limit {
        Some(n) => train.head(n)?,
        None => train.clone(),
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut timing = Timing::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let order = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch, cfg.shuffle)?;
        for (bi, idx) in order.iter().enumerate() {
            let batch = train.batch(idx)?;
            let x = match &cfg.attack {
                Some(attack) => {
                    let seed = derive_seed(derive_seed(attack.seed, epoch as u64), bi as u64);
                    let attack = attack.clone().with_seed(seed);
                    adversarial_batch(&model, &batch, &attack, cfg.clean_fraction)?
                }
                None => batch.x().clone(),
            };
            let lg = model.loss_and_grad(
                &x,
                batch.y(),
                Reduction::Mean,
                Wrt {
                    params: true,
                    input: false,
                },
            )?;
            loss_sum += lg.loss * batch.len() as f64;
            let grads = lg.param_grads.expect("parameter gradients requested");
            optimizer.step(model.params_mut(), &grads, lr)?;
        }
        timing.train += started.elapsed();

        let started = Instant::now();
        let on_train = evaluate(&model, &train_eval, Some(&cfg.eval_attack))?;
        let on_test = evaluate(&model, test, Some(&cfg.eval_attack))?;
        timing.eval += started.elapsed();

        let row = MetricsRow {
            epoch,
            lr,
            clean_train_acc: on_train.clean_acc,
            clean_test_acc: on_test.clean_acc,
            robust_train_acc: on_train.robust_acc.expect("attack given"),
            robust_test_acc: on_test.robust_acc.expect("attack given"),
            train_loss: loss_sum / train.len() as f64,
            adv_test_loss: on_test.robust_loss.expect("attack given"),
        };
        if !row.train_loss.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged at epoch {epoch}")));
        }
        metrics.push(row);
    }
    Ok(TrainReport {
        model,
        optimizer,
        metrics,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian2, GaussianSpec};
    use crate::model::Architecture;

    fn small_data() -> (Dataset, Dataset) {
        gaussian2(&GaussianSpec::two_class(40, 40, 1.0, 0.3, 4, 1)).unwrap()
    }

    fn cfg(epochs: usize, attack: Option<AttackConfig>) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            schedule: ScheduleSpec::Constant { base_lr: 0.05 },
            optimizer: OptimizerKind::sgd_default(),
            attack,
            eval_attack: AttackConfig::pgd(0.02, 3),
            seed: 11,
            shuffle: true,
            clean_fraction: 0.0,
            eval_train_limit: None,
        }
    }

    #[test]
    fn negligible_learning_rate_leaves_params_unchanged() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 0).unwrap();
        let mut c = cfg(1, None);
        c.schedule = ScheduleSpec::Constant { base_lr: 1e-30 };
        let report = pretrain(&model, &train, &test, &c).unwrap();
        for (a, b) in report.model.params().iter().zip(model.params()) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_integrity() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 0).unwrap();
        let mut c = cfg(3, None);
        c.schedule = ScheduleSpec::Step {
            base_lr: 0.1,
            plateau: 1,
            gamma: 0.5,
        };
        let report = pretrain(&model, &train, &test, &c).unwrap();
        assert_eq!(report.metrics.len(), 3);
        for (e, m) in report.metrics.iter().enumerate() {
            assert_eq!(m.epoch, e);
            assert_eq!(m.lr, c.schedule.lr_at(e));
            for acc in [m.clean_train_acc, m.clean_test_acc, m.robust_train_acc, m.robust_test_acc] {
                assert!((0.0..=1.0).contains(&acc));
            }
        }
    }

    #[test]
    fn attack_presence_is_checked() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 0).unwrap();
        assert!(pretrain(&model, &train, &test, &cfg(1, Some(AttackConfig::pgd(0.1, 2)))).is_err());
        assert!(adversarial_train(&model, &train, &test, &cfg(1, None)).is_err());
        let mut c = cfg(1, None);
        c.epochs = 0;
        assert!(matches!(pretrain(&model, &train, &test, &c), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_epoch_finetune_returns_the_input() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 5).unwrap();
        let mut ft = FinetuneConfig::new(AttackConfig::pgd(0.05, 3), AttackConfig::pgd(0.05, 3), 16);
        ft.epochs = 0;
        let report = adversarial_finetune(&model, &train, &test, &ft).unwrap();
        assert_eq!(report.model, model);
        assert!(report.metrics.is_empty());
    }

    #[test]
    fn finetune_rejects_short_schedule_horizon() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 5).unwrap();
        let mut ft = FinetuneConfig::new(AttackConfig::pgd(0.05, 3), AttackConfig::pgd(0.05, 3), 16);
        ft.epochs = 12;
        assert!(matches!(
            adversarial_finetune(&model, &train, &test, &ft),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn clean_fraction_one_matches_natural_training() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 2).unwrap();
        let natural = pretrain(&model, &train, &test, &cfg(2, None)).unwrap();
        let mut c = cfg(2, Some(AttackConfig::pgd(0.1, 3)));
        c.clean_fraction = 1.0;
        let mixed = adversarial_train(&model, &train, &test, &c).unwrap();
        assert_eq!(natural.metrics, mixed.metrics);
    }

    #[test]
    fn training_does_not_mutate_datasets() {
        let (train, test) = small_data();
        let (train0, test0) = (train.clone(), test.clone());
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 2).unwrap();
        adversarial_train(&model, &train, &test, &cfg(1, Some(AttackConfig::pgd(0.1, 2)))).unwrap();
        assert_eq!(train, train0);
        assert_eq!(test, test0);
    }

    fn separable_data() -> (Dataset, Dataset) {
        gaussian2(&GaussianSpec::two_class(60, 200, 1.0, 0.05, 4, 3)).unwrap()
    }

    // Zero error for the linear rule "coordinate 0 above 0.5 means class 1".
    fn axis_rule_is_perfect(d: &Dataset) -> bool {
        (0..d.len()).all(|i| (d.x().data()[i * d.dim()] > 0.5) == (d.y()[i] == 1))
    }

    #[test]
    fn separable_gaussians_reach_perfect_clean_accuracy() {
        let (train, test) = separable_data();
        assert!(axis_rule_is_perfect(&train) && axis_rule_is_perfect(&test));
        let model = Model::he_uniform(Architecture::mlp(4, &[16], 2), 1).unwrap();
        let report = pretrain(&model, &train, &test, &cfg(20, None)).unwrap();
        assert_eq!(report.metrics.last().unwrap().clean_test_acc, 1.0);
    }

    #[test]
    fn attacks_inside_the_margin_leave_robust_accuracy_perfect() {
        let (train, test) = separable_data();
        // Class means sit 0.5·μ/(μ + 4σ) ≈ 0.42 from the boundary after mapping.
        let attack = AttackConfig::pgd(0.1, 5);
        let model = Model::he_uniform(Architecture::mlp(4, &[16], 2), 1).unwrap();
        let mut c = cfg(20, Some(attack.clone()));
        c.eval_attack = attack.clone();
        let report = adversarial_train(&model, &train, &test, &c).unwrap();
        let e = evaluate(&report.model, &test, Some(&attack)).unwrap();
        assert_eq!(e.robust_acc, Some(1.0));
    }

    #[test]
    fn zero_epsilon_adversarial_training_is_pretraining() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 4).unwrap();
        let natural = pretrain(&model, &train, &test, &cfg(3, None)).unwrap();
        let adv = adversarial_train(&model, &train, &test, &cfg(3, Some(AttackConfig::pgd(0.0, 5)))).unwrap();
        assert_eq!(natural.model, adv.model);
        assert_eq!(natural.optimizer, adv.optimizer);
        assert_eq!(natural.metrics, adv.metrics);
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 4).unwrap();
        let c = cfg(2, Some(AttackConfig::pgd(0.05, 3).with_init(crate::attack::InitMode::Uniform)));
        let a = adversarial_train(&model, &train, &test, &c).unwrap();
        let b = adversarial_train(&model, &train, &test, &c).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn finetune_lr_column_follows_the_schedule() {
        let (train, test) = small_data();
        let model = Model::he_uniform(Architecture::mlp(4, &[8], 2), 5).unwrap();
        let ft = FinetuneConfig::new(AttackConfig::pgd(0.05, 2), AttackConfig::pgd(0.05, 2), 16);
        let report = adversarial_finetune(&model, &train, &test, &ft).unwrap();
        assert_eq!(report.metrics.len(), ft.epochs);
        for m in &report.metrics {
            assert_eq!(m.lr, ft.schedule.lr_at(m.epoch));
        }
    }
}
