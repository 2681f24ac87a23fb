//! Adversarial training, PGD attacks, and short adversarial fine-tuning for
//! small MLP and convolutional classifiers on the CPU.
//!
//! Everything is `f64`, single-threaded, and seeded, so a run is
//! reproducible bit for bit.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub(crate) mod nn;
pub mod optim;
pub mod projection;
pub mod recipes;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attack::{fgsm, pgd, project_linf, AttackConfig, AttackResult, InitMode};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ExperimentConfig;
pub use data::{gaussian2, load_idx, Dataset, GaussianSpec, Split};
pub use error::{Error, Result};
pub use eval::{evaluate, Evaluation, MetricsRow};
pub use model::{Architecture, Batch, Layer, Model};
pub use nn::ConvGeometry;
pub use optim::{OptimizerKind, OptimizerState};
pub use projection::{lda_reduce, pca_reduce, project_embedding, Projection2D};
pub use runner::{run_experiment, RunReport};
pub use schedule::ScheduleSpec;
pub use tape::{ComputationTape, Reduction, Var};
pub use tensor::Tensor;
pub use train::{adversarial_finetune, adversarial_train, pretrain, FinetuneConfig, TrainConfig, TrainReport};
