//! Canned experiments on the desk-scale Gaussian dataset.
//!
//! | recipe           | phases                                                        |
//! |------------------|---------------------------------------------------------------|
//! | `aft-demo`       | pretrain → adv-finetune → evaluate (small and quick)          |
//! | `overfit-curve`  | 60 epochs of PGD adversarial training, multistep drops        |
//! | `plateau-sweep`  | pretrain, then step-LR(i, 0.5) fine-tunes for i = 1, 2, …, 32 |
//! | `aft-vs-scratch` | pretrain + 10-epoch fine-tune against 60 epochs from scratch  |
//! | `embedding-map`  | LDA→PCA projections before and after fine-tuning              |

use crate::attack::{AttackConfig, InitMode};
use crate::config::{DatasetSpec, ExperimentConfig, ModelSpec, Phase};
use crate::data::{GaussianSpec, Split};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::schedule::ScheduleSpec;
use crate::train::{FinetuneConfig, TrainConfig};

pub const RECIPES: [&str; 5] = ["aft-demo", "overfit-curve", "plateau-sweep", "aft-vs-scratch", "embedding-map"];

pub const PLATEAU_LENGTHS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Every recipe's dataset: 10 000 samples in total.
pub fn desk_dataset() -> GaussianSpec {
    let mut spec = GaussianSpec::two_class(DESK.per_class, DESK.test_per_class, DESK.mu, DESK.sigma, DESK.dim, 1);
    spec.envelope = DESK.envelope;
    spec
}

struct Desk {
    per_class: usize,
    test_per_class: usize,
    mu: f64,
    sigma: f64,
    dim: usize,
    envelope: f64,
    epsilon: f64,
    batch_size: usize,
    scratch_lr: f64,
    pretrain_epochs: usize,
    pretrain_lr: f64,
    finetune_lr: f64,
    sweep_lr: f64,
    sweep_epochs: usize,
}

const DESK: Desk = Desk {
    per_class: 250,
    test_per_class: 4750,
    mu: 1.0,
    sigma: 1.0,
    dim: 20,
    envelope: 0.5,
    epsilon: 0.03,
    batch_size: 16,
    scratch_lr: 0.05,
    pretrain_epochs: 10,
    pretrain_lr: 0.02,
    finetune_lr: 1e-3,
    sweep_lr: 3e-3,
    sweep_epochs: 16,
};

pub fn desk_model() -> ModelSpec {
    ModelSpec::Mlp { hidden: vec![128, 64] }
}

/// PGD-10 at the desk ε with the default step size.
pub fn desk_attack() -> AttackConfig {
    AttackConfig::pgd(DESK.epsilon, 10)
}

fn train_config(epochs: usize, schedule: ScheduleSpec, attack: Option<AttackConfig>) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: DESK.batch_size,
        schedule,
        optimizer: OptimizerKind::sgd_default(),
        attack,
        eval_attack: desk_attack(),
        seed: 0,
        shuffle: true,
        clean_fraction: 0.0,
        eval_train_limit: None,
    }
}

/// Natural training used as the starting point of every fine-tune.
pub fn desk_pretrain() -> TrainConfig {
    train_config(
        DESK.pretrain_epochs,
        ScheduleSpec::Multistep {
            base_lr: DESK.pretrain_lr,
            milestones: vec![DESK.pretrain_epochs / 2, DESK.pretrain_epochs * 3 / 4],
            gamma: 0.1,
        },
        None,
    )
}

/// 60 epochs of PGD-10 adversarial training with drops at epochs 30 and 45.
pub fn desk_scratch() -> TrainConfig {
    train_config(
        60,
        ScheduleSpec::Multistep {
            base_lr: DESK.scratch_lr,
            milestones: vec![30, 45],
            gamma: 0.1,
        },
        Some(desk_attack()),
    )
}

/// Ten epochs of Adam under slow-start/fast-decay with the desk peak rate.
pub fn desk_finetune() -> FinetuneConfig {
    let mut ft = FinetuneConfig::new(desk_attack(), desk_attack(), DESK.batch_size);
    if let ScheduleSpec::Ssfd { peak_lr, .. } = &mut ft.schedule {
        *peak_lr = DESK.finetune_lr;
    }
    ft
}

/// Adversarial fine-tune under step-LR(`plateau`, 0.5).
pub fn desk_plateau_finetune(plateau: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs: DESK.sweep_epochs,
        schedule: ScheduleSpec::Step {
            base_lr: DESK.sweep_lr,
            plateau,
            gamma: 0.5,
        },
        ..desk_finetune()
    }
}

fn base(name: &str, phases: Vec<Phase>) -> ExperimentConfig {
    ExperimentConfig {
        seed: 2024,
        output_dir: format!("runs/{name}").into(),
        dataset: DatasetSpec::Gaussian(desk_dataset()),
        model: desk_model(),
        phases,
    }
}

fn pretrain_phase() -> Phase {
    Phase::Pretrain {
        name: "pretrain".into(),
        init: None,
        train: desk_pretrain(),
    }
}

pub fn recipe(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "aft-demo" => {
            let mut pre = desk_pretrain();
            pre.epochs = 3;
            pre.schedule = ScheduleSpec::Constant { base_lr: DESK.pretrain_lr };
            let mut ft = desk_finetune();
            ft.epochs = 3;
            let mut cfg = base(
                name,
                vec![
                    Phase::Pretrain {
                        name: "pretrain".into(),
                        init: None,
                        train: pre,
                    },
                    Phase::AdvFinetune {
                        name: "finetune".into(),
                        init: "pretrain".into(),
                        finetune: ft,
                    },
                    Phase::Evaluate {
                        name: "evaluate".into(),
                        init: "finetune".into(),
                        attack: AttackConfig::pgd(DESK.epsilon, 20).with_init(InitMode::Uniform),
                    },
                ],
            );
            let mut small = GaussianSpec::two_class(100, 100, DESK.mu, DESK.sigma, DESK.dim, 1);
            small.envelope = DESK.envelope;
            cfg.dataset = DatasetSpec::Gaussian(small);
            cfg
        }
        "overfit-curve" => base(
            name,
            vec![Phase::AdvTrain {
                name: "pgd-at".into(),
                init: None,
                train: desk_scratch(),
            }],
        ),
        "plateau-sweep" => {
            let mut phases = vec![pretrain_phase()];
            for i in PLATEAU_LENGTHS {
                phases.push(Phase::AdvFinetune {
                    name: format!("step-{i}"),
                    init: "pretrain".into(),
                    finetune: desk_plateau_finetune(i),
                });
            }
            base(name, phases)
        }
        "aft-vs-scratch" => base(
            name,
            vec![
                pretrain_phase(),
                Phase::AdvFinetune {
                    name: "aft".into(),
                    init: "pretrain".into(),
                    finetune: desk_finetune(),
                },
                Phase::AdvTrain {
                    name: "scratch".into(),
                    init: None,
                    train: desk_scratch(),
                },
                Phase::Evaluate {
                    name: "eval-aft".into(),
                    init: "aft".into(),
                    attack: AttackConfig::pgd(DESK.epsilon, 20),
                },
                Phase::Evaluate {
                    name: "eval-scratch".into(),
                    init: "scratch".into(),
                    attack: AttackConfig::pgd(DESK.epsilon, 20),
                },
            ],
        ),
        "embedding-map" => base(
            name,
            vec![
                pretrain_phase(),
                Phase::AdvFinetune {
                    name: "aft".into(),
                    init: "pretrain".into(),
                    finetune: desk_finetune(),
                },
                Phase::ProjectEmbedding {
                    name: "map-natural".into(),
                    init: "pretrain".into(),
                    split: Split::Test,
                },
                Phase::ProjectEmbedding {
                    name: "map-aft".into(),
                    init: "aft".into(),
                    split: Split::Test,
                },
            ],
        ),
        other => {
            return Err(Error::config(
                "recipe",
                format!("unknown recipe `{other}` (known: {})", RECIPES.join(", ")),
            ))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
