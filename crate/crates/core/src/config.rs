//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [dataset]
//! kind = "gaussian"
//! per_class = 500
//! test_per_class = 500
//! mu = 1.0
//! sigma = 1.0
//! dim = 20
//! seed = 1
//!
//! [model]
//! kind = "mlp"
//! hidden = [128, 64]
//!
//! [[phase]]
//! kind = "pretrain"
//! name = "natural"
//! [phase.train]
//! epochs = 5
//! batch_size = 64
//! schedule = { kind = "constant", base_lr = 0.05 }
//! optimizer = { kind = "sgd", momentum = 0.9, weight_decay = 5e-4 }
//! eval_attack = { epsilon = 0.05, steps = 10 }
//!
//! [[phase]]
//! kind = "adv-finetune"
//! name = "aft"
//! init = "natural"
//! [phase.finetune]
//! batch_size = 64
//! attack = { epsilon = 0.05, steps = 10 }
//! eval_attack = { epsilon = 0.05, steps = 10 }
//! ```
//!
//! `init` names an earlier checkpoint-producing phase or a checkpoint file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{gaussian2, load_idx, Dataset, GaussianSpec, Split};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::train::{FinetuneConfig, TrainConfig};

/// Environment variable that relative `output_dir`s are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "ADVFT_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default, rename = "phase")]
    pub phases: Vec<Phase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Gaussian(GaussianSpec),
    /// IDX image and label files; pixels are scaled into `[0, 1]`.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Gaussian(spec) => gaussian2(spec),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?.with_split(Split::Train);
                let test = load_idx(test_images, test_labels)?.with_split(Split::Test);
                Ok((train, test))
            }
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}

fn default_channels() -> [usize; 2] {
    [8, 16]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    /// Two same-padded 3×3 convolutions, then a linear classifier.
    Conv {
        #[serde(default = "default_channels")]
        channels: [usize; 2],
    },
}

impl ModelSpec {
    /// Architecture matching the shape and class count of `train`.
    pub fn architecture(&self, train: &Dataset, num_classes: usize) -> Result<Architecture> {
        let arch = match self {
            ModelSpec::Mlp { hidden } => Architecture::mlp(train.dim(), hidden, num_classes),
            ModelSpec::Conv { channels } => {
                let [c, h, w] = train.image_shape().ok_or_else(|| {
                    Error::Architecture("conv models need an image dataset (IDX input)".into())
                })?;
                Architecture::conv(c, h, w, *channels, num_classes)
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn test_split() -> Split {
    Split::Test
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Phase {
    /// Natural training; starts from a fresh He-uniform model unless `init` is set.
    Pretrain {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<String>,
        train: TrainConfig,
    },
    AdvTrain {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<String>,
        train: TrainConfig,
    },
    AdvFinetune {
        name: String,
        init: String,
        finetune: FinetuneConfig,
    },
    /// Test-split clean and PGD accuracy of a checkpoint.
    Evaluate {
        name: String,
        init: String,
        attack: AttackConfig,
    },
    ProjectEmbedding {
        name: String,
        init: String,
        #[serde(default = "test_split")]
        split: Split,
    },
}

impl Phase {
    pub fn name(&self) -> &str {
        match self {
            Phase::Pretrain { name, .. }
            | Phase::AdvTrain { name, .. }
            | Phase::AdvFinetune { name, .. }
            | Phase::Evaluate { name, .. }
            | Phase::ProjectEmbedding { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Phase::Pretrain { .. } => "pretrain",
            Phase::AdvTrain { .. } => "adv-train",
            Phase::AdvFinetune { .. } => "adv-finetune",
            Phase::Evaluate { .. } => "evaluate",
            Phase::ProjectEmbedding { .. } => "project-embedding",
        }
    }

    pub fn init(&self) -> Option<&str> {
        match self {
            Phase::Pretrain { init, .. } | Phase::AdvTrain { init, .. } => init.as_deref(),
            Phase::AdvFinetune { init, .. } | Phase::Evaluate { init, .. } | Phase::ProjectEmbedding { init, .. } => {
                Some(init)
            }
        }
    }

    /// Whether the phase writes `model.ckpt`.
    pub fn produces_checkpoint(&self) -> bool {
        !matches!(self, Phase::ProjectEmbedding { .. })
    }
}

/// Where a phase gets its starting model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitSource {
    Fresh,
    Phase(String),
    File(PathBuf),
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| {
                    let line = text[..s.start].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// `output_dir` resolved against `$ADVFT_OUTPUT_ROOT` when it is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, seed) in self.seeds() {
            if seed > i64::MAX as u64 {
                return Err(Error::config(field, "seeds must fit a TOML integer (at most 2^63 - 1)"));
            }
        }
        if let DatasetSpec::Gaussian(spec) = &self.dataset {
            spec.validate().map_err(|e| prefix("dataset", e))?;
        }
        if let ModelSpec::Mlp { hidden } = &self.model {
            if hidden.contains(&0) {
                return Err(Error::config("model.hidden", "layer widths must be >= 1"));
            }
        }
        let mut seen = HashSet::new();
        let mut checkpoints = HashSet::new();
        for (i, phase) in self.phases.iter().enumerate() {
            let at = |field: &str| format!("phase[{i}].{field}");
            let name = phase.name();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::config(at("name"), "use letters, digits, '-' or '_'"));
            }
            if !seen.insert(name.to_string()) {
                return Err(Error::config(at("name"), format!("duplicate phase name `{name}`")));
            }
            if let Some(init) = phase.init() {
                if init == name {
                    return Err(Error::config(at("init"), "a phase cannot initialise from itself"));
                }
                if self.phases[i + 1..].iter().any(|p| p.name() == init) {
                    return Err(Error::config(at("init"), format!("`{init}` runs later")));
                }
                if seen.contains(init) && !checkpoints.contains(init) {
                    return Err(Error::config(at("init"), format!("`{init}` does not produce a checkpoint")));
                }
            }
            match phase {
                Phase::Pretrain { train, .. } => {
                    train.validate().map_err(|e| prefix(&at("train"), e))?;
                    if train.attack.is_some() {
                        return Err(Error::config(at("train.attack"), "pretraining uses natural samples only"));
                    }
                }
                Phase::AdvTrain { train, .. } => {
                    train.validate().map_err(|e| prefix(&at("train"), e))?;
                    if train.attack.is_none() {
                        return Err(Error::config(at("train.attack"), "adversarial training needs an attack"));
                    }
                }
                Phase::AdvFinetune { finetune, .. } => {
                    finetune.validate().map_err(|e| prefix(&at("finetune"), e))?;
                }
                Phase::Evaluate { attack, .. } => {
                    attack.validate().map_err(|e| prefix(&at("attack"), e))?;
                }
                Phase::ProjectEmbedding { .. } => {}
            }
            if phase.produces_checkpoint() {
                checkpoints.insert(name.to_string());
            }
        }
        Ok(())
    }

    fn seeds(&self) -> Vec<(String, u64)> {
        let mut out = vec![("seed".to_string(), self.seed)];
        if let DatasetSpec::Gaussian(spec) = &self.dataset {
            out.push(("dataset.seed".into(), spec.seed));
        }
        for (i, phase) in self.phases.iter().enumerate() {
            let at = |field: &str| format!("phase[{i}].{field}");
            match phase {
                Phase::Pretrain { train, .. } | Phase::AdvTrain { train, .. } => {
                    out.push((at("train.seed"), train.seed));
                    out.push((at("train.eval_attack.seed"), train.eval_attack.seed));
                    if let Some(a) = &train.attack {
                        out.push((at("train.attack.seed"), a.seed));
                    }
                }
                Phase::AdvFinetune { finetune, .. } => {
                    out.push((at("finetune.seed"), finetune.seed));
                    out.push((at("finetune.attack.seed"), finetune.attack.seed));
                    out.push((at("finetune.eval_attack.seed"), finetune.eval_attack.seed));
                }
                Phase::Evaluate { attack, .. } => out.push((at("attack.seed"), attack.seed)),
                Phase::ProjectEmbedding { .. } => {}
            }
        }
        out
    }

    /// Resolves `init` of phase `index`; call after [`validate`](Self::validate).
    pub fn init_source(&self, index: usize) -> InitSource {
        match self.phases[index].init() {
            None => InitSource::Fresh,
            Some(init) if self.phases[..index].iter().any(|p| p.name() == init) => InitSource::Phase(init.to_string()),
            Some(path) => InitSource::File(PathBuf::from(path)),
        }
    }
}

fn prefix(scope: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{scope}.{field}"), message),
        other => other,
    }
}
