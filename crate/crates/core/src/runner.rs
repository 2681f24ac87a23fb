//! Executes an [`ExperimentConfig`] phase by phase and writes its artifacts.
//!
//! Output layout under the run directory:
//!
//! ```text
//! config.toml            canonical form of the parsed config
//! manifest.json          config hash, seed, artifact hashes
//! <phase>/model.ckpt     every phase except project-embedding
//! <phase>/metrics.csv    pretrain, adv-train, adv-finetune
//! <phase>/eval.json      evaluate
//! <phase>/projection.csv project-embedding
//! ```
//!
//! Wall-clock times only appear in the returned [`RunReport`], never in a
//! hashed artifact, so reruns of one config produce identical files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::checkpoint::{load_checkpoint, Checkpoint, CHECKPOINT_VERSION};
use crate::config::{ExperimentConfig, InitSource, Phase};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_metrics_csv, METRICS_CSV_VERSION};
use crate::model::Model;
use crate::projection::project_embedding;
use crate::rng::{derive_seed, label_hash};
use crate::train::{adversarial_finetune, adversarial_train, pretrain, FinetuneConfig, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub name: String,
    pub kind: &'static str,
    pub clean_test_acc: Option<f64>,
    pub robust_test_acc: Option<f64>,
    /// Attack + optimizer time of a training phase.
    pub train_time: Duration,
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub phases: Vec<PhaseSummary>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seed: u64,
    metrics_csv_version: u32,
    checkpoint_version: u32,
    phases: Vec<ManifestPhase<'a>>,
    artifacts: Vec<Artifact>,
}

#[derive(Serialize)]
struct ManifestPhase<'a> {
    name: &'a str,
    kind: &'a str,
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    split: Split,
    samples: usize,
    clean_acc: f64,
    clean_loss: f64,
    robust_acc: f64,
    robust_loss: f64,
    attack: &'a AttackConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Seed of the phase called `name` in a run seeded with `seed`.
pub fn phase_seed(seed: u64, name: &str) -> u64 {
    derive_seed(seed, label_hash(name))
}

fn reseed_attack(attack: &AttackConfig, phase: u64, role: &str) -> AttackConfig {
    attack
        .clone()
        .with_seed(derive_seed(phase, label_hash(role) ^ attack.seed))
}

fn reseed_train(cfg: &TrainConfig, phase: u64) -> TrainConfig {
    let mut cfg = cfg.clone();
    cfg.seed = derive_seed(phase, cfg.seed);
    cfg.attack = cfg.attack.as_ref().map(|a| reseed_attack(a, phase, "attack"));
    cfg.eval_attack = reseed_attack(&cfg.eval_attack, phase, "eval-attack");
    cfg
}

fn reseed_finetune(cfg: &FinetuneConfig, phase: u64) -> FinetuneConfig {
    let mut cfg = cfg.clone();
    cfg.seed = derive_seed(phase, cfg.seed);
    cfg.attack = reseed_attack(&cfg.attack, phase, "attack");
    cfg.eval_attack = reseed_attack(&cfg.eval_attack, phase, "eval-attack");
    cfg
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    train: Dataset,
    test: Dataset,
    models: HashMap<String, Model>,
    artifacts: Vec<PathBuf>,
}

impl Run<'_> {
    fn write(&mut self, rel: PathBuf, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(&rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::file(&path, e))?;
        self.artifacts.push(rel);
        Ok(())
    }

    fn save(&mut self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        self.write(Path::new(name).join("model.ckpt"), &ckpt.to_bytes()?)
    }

    fn starting_model(&self, index: usize, seed: u64) -> Result<(Model, String)> {
        match self.cfg.init_source(index) {
            InitSource::Fresh => {
                let arch = self.cfg.model.architecture(&self.train, self.num_classes())?;
                let model = Model::he_uniform(arch, derive_seed(seed, label_hash("init")))?;
                Ok((model, "fresh he-uniform init".into()))
            }
            InitSource::Phase(name) => Ok((self.models[&name].clone(), format!("from phase {name}"))),
            InitSource::File(path) => {
                let ckpt = load_checkpoint(&path)?;
                Ok((ckpt.model, format!("from checkpoint {}", path.display())))
            }
        }
    }

    fn num_classes(&self) -> usize {
        self.train.num_classes().max(self.test.num_classes())
    }

    fn finish_training(&mut self, name: &str, seed: u64, origin: String, report: TrainReport) -> Result<PhaseSummary> {
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &report.metrics)?;
        self.write(Path::new(name).join("metrics.csv"), &csv)?;
        let mut ckpt = Checkpoint::new(report.model.clone())
            .with_optimizer(report.optimizer)
            .with_provenance(format!("phase {name}, {origin}"));
        ckpt.seed = seed;
        ckpt.epochs_completed = report.metrics.len();
        self.save(name, &ckpt)?;
        self.models.insert(name.to_string(), report.model);
        let last = report.metrics.last();
        Ok(PhaseSummary {
            name: name.to_string(),
            kind: "",
            clean_test_acc: last.map(|m| m.clean_test_acc),
            robust_test_acc: last.map(|m| m.robust_test_acc),
            train_time: report.timing.train,
            wall_time: Duration::ZERO,
        })
    }

    fn phase(&mut self, index: usize) -> Result<PhaseSummary> {
        let phase = &self.cfg.phases[index];
        let name = phase.name();
        let seed = phase_seed(self.cfg.seed, name);
        let (model, origin) = self.starting_model(index, seed)?;
        let started = Instant::now();
        let mut summary = match phase {
            Phase::Pretrain { train, .. } => {
                let report = pretrain(&model, &self.train, &self.test, &reseed_train(train, seed))?;
                self.finish_training(name, seed, origin, report)?
            }
            Phase::AdvTrain { train, .. } => {
                let report = adversarial_train(&model, &self.train, &self.test, &reseed_train(train, seed))?;
                self.finish_training(name, seed, origin, report)?
            }
            Phase::AdvFinetune { finetune, .. } => {
                let report = adversarial_finetune(&model, &self.train, &self.test, &reseed_finetune(finetune, seed))?;
                self.finish_training(name, seed, origin, report)?
            }
            Phase::Evaluate { attack, .. } => {
                let attack = reseed_attack(attack, seed, "eval-attack");
                let e = evaluate(&model, &self.test, Some(&attack))?;
                let record = EvalRecord {
                    split: Split::Test,
                    samples: self.test.len(),
                    clean_acc: e.clean_acc,
                    clean_loss: e.clean_loss,
                    robust_acc: e.robust_acc.expect("attack given"),
                    robust_loss: e.robust_loss.expect("attack given"),
                    attack: &attack,
                };
                let json = serde_json::to_vec_pretty(&record).map_err(|e| Error::contract(e.to_string()))?;
                self.write(Path::new(name).join("eval.json"), &json)?;
                let mut ckpt = Checkpoint::new(model.clone()).with_provenance(format!("phase {name}, evaluated {origin}"));
                ckpt.seed = seed;
                self.save(name, &ckpt)?;
                self.models.insert(name.to_string(), model);
                PhaseSummary {
                    name: name.to_string(),
                    kind: "",
                    clean_test_acc: Some(e.clean_acc),
                    robust_test_acc: e.robust_acc,
                    train_time: Duration::ZERO,
                    wall_time: Duration::ZERO,
                }
            }
            Phase::ProjectEmbedding { split, .. } => {
                let data = match split {
                    Split::Train => &self.train,
                    Split::Test => &self.test,
                };
                let projection = project_embedding(&model, data)?;
                let mut csv = Vec::new();
                projection.write_csv(&mut csv)?;
                self.write(Path::new(name).join("projection.csv"), &csv)?;
                PhaseSummary {
                    name: name.to_string(),
                    kind: "",
                    clean_test_acc: None,
                    robust_test_acc: None,
                    train_time: Duration::ZERO,
                    wall_time: Duration::ZERO,
                }
            }
        };
        summary.kind = phase.kind();
        summary.wall_time = started.elapsed();
        Ok(summary)
    }
}

/// Runs every phase of `cfg` in order, writing artifacts under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let canonical = cfg.to_toml()?;
    std::fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let (train, test) = if cfg.phases.is_empty() {
        (None, None)
    } else {
        let (a, b) = cfg.dataset.load()?;
        (Some(a), Some(b))
    };
    let mut phases = Vec::new();
    let mut artifacts = Vec::new();
    if let (Some(train), Some(test)) = (train, test) {
        let mut run = Run {
            cfg,
            out,
            train,
            test,
            models: HashMap::new(),
            artifacts: Vec::new(),
        };
        run.write(PathBuf::from("config.toml"), canonical.as_bytes())?;
        for i in 0..cfg.phases.len() {
            phases.push(run.phase(i)?);
        }
        artifacts = run.artifacts;
    } else {
        let path = out.join("config.toml");
        std::fs::write(&path, canonical.as_bytes()).map_err(|e| Error::file(&path, e))?;
        artifacts.push(PathBuf::from("config.toml"));
    }

    let mut listed = Vec::with_capacity(artifacts.len());
    for rel in &artifacts {
        let path = out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        listed.push(Artifact {
            path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        config_sha256: sha256_hex(canonical.as_bytes()),
        seed: cfg.seed,
        metrics_csv_version: METRICS_CSV_VERSION,
        checkpoint_version: CHECKPOINT_VERSION,
        phases: cfg
            .phases
            .iter()
            .map(|p| ManifestPhase {
                name: p.name(),
                kind: p.kind(),
            })
            .collect(),
        artifacts: listed,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::contract(e.to_string()))?;
    let path = out.join("manifest.json");
    std::fs::write(&path, json).map_err(|e| Error::file(&path, e))?;
    Ok(RunReport {
        output_dir: out.to_path_buf(),
        phases,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Table with one row per phase: clean and PGD test accuracy (%) and wall time.
pub fn format_summary(phases: &[PhaseSummary]) -> String {
    let width = phases.iter().map(|p| p.name.len() + p.kind.len() + 3).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$} | {:>7} | {:>7} | {:>9}", "Phase", "Clean", "PGD", "Time (s)");
    let _ = writeln!(s, "{}", "-".repeat(width + 34));
    for p in phases {
        let label = format!("{} ({})", p.name, p.kind);
        let _ = writeln!(
            s,
            "{:<width$} | {:>7} | {:>7} | {:>9.2}",
            label,
            pct(p.clean_test_acc),
            pct(p.robust_test_acc),
            p.wall_time.as_secs_f64()
        );
    }
    s
}
