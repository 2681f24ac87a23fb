use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use advft::config::OUTPUT_ROOT_ENV;
use advft::data::{load_idx, Dataset, Split};
use advft::recipes::{recipe, RECIPES};
use advft::runner::{format_summary, run_experiment};
use advft::{evaluate, load_checkpoint, project_embedding, AttackConfig, ExperimentConfig, InitMode};

#[derive(Parser)]
#[command(name = "advft", version, about = "Desk-scale adversarial training and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (or a built-in recipe).
    Run {
        /// TOML experiment config.
        config: Option<PathBuf>,
        /// Built-in recipe name; see `advft recipe --list`.
        #[arg(long, conflicts_with = "config")]
        recipe: Option<String>,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root for relative output directories.
        #[arg(long, env = OUTPUT_ROOT_ENV)]
        output_root: Option<PathBuf>,
    },
    /// Clean and PGD accuracy of a checkpoint on a test split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Step size; 2.5·eps/steps when omitted.
        #[arg(long)]
        alpha: Option<f64>,
        /// Start PGD uniformly inside the ε-ball.
        #[arg(long)]
        random_init: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
    },
    /// LDA→PCA projection of a checkpoint's penultimate-layer embedding, as CSV.
    Project {
        checkpoint: PathBuf,
        /// Experiment config whose dataset to use, or an IDX image file.
        dataset: PathBuf,
        /// IDX label file when `dataset` is an IDX image file.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in recipe as TOML.
    Recipe {
        name: Option<String>,
        #[arg(long)]
        list: bool,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    /// Experiment config whose dataset to evaluate on.
    #[arg(long, conflicts_with_all = ["images", "labels"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn dataset_from_config(path: &Path, split: SplitArg) -> Result<Dataset> {
    let cfg = ExperimentConfig::load(path)?;
    let (train, test) = cfg.dataset.load()?;
    Ok(match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    })
}

fn idx(images: &Path, labels: &Path) -> Result<Dataset> {
    Ok(load_idx(images, labels)?.with_split(Split::Test))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            recipe: name,
            out,
            output_root,
        } => {
            let cfg = match (config, name) {
                (Some(path), None) => ExperimentConfig::load(&path)?,
                (None, Some(name)) => recipe(&name)?,
                _ => bail!("give either a config path or --recipe <name>"),
            };
            let dir = match (out, output_root) {
                (Some(dir), _) => dir,
                (None, Some(root)) if cfg.output_dir.is_relative() => root.join(&cfg.output_dir),
                _ => cfg.output_dir.clone(),
            };
            let report = run_experiment(&cfg, &dir)?;
            print!("{}", format_summary(&report.phases));
            println!("artifacts: {}", report.output_dir.display());
        }
        Command::Eval {
            checkpoint,
            eps,
            steps,
            alpha,
            random_init,
            seed,
            data,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let dataset = match (data.data, data.images, data.labels) {
                (Some(path), _, _) => dataset_from_config(&path, SplitArg::Test)?,
                (None, Some(images), Some(labels)) => idx(&images, &labels)?,
                _ => bail!("give --data <config> or --images/--labels"),
            };
            let mut attack = AttackConfig::pgd(eps, steps).with_seed(seed);
            if let Some(a) = alpha {
                attack = attack.with_alpha(a);
            }
            if random_init {
                attack = attack.with_init(InitMode::Uniform);
            }
            let e = evaluate(&ckpt.model, &dataset, Some(&attack))?;
            let record = serde_json::json!({
                "samples": dataset.len(),
                "clean_acc": e.clean_acc,
                "clean_loss": e.clean_loss,
                "robust_acc": e.robust_acc,
                "robust_loss": e.robust_loss,
                "attack": attack,
            });
            println!("{}", serde_json::to_string_pretty(&record)?);
        }
        Command::Project {
            checkpoint,
            dataset,
            labels,
            split,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = match labels {
                Some(labels) => idx(&dataset, &labels)?,
                None => dataset_from_config(&dataset, split)?,
            };
            let projection = project_embedding(&ckpt.model, &data)?;
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    projection.write_csv(std::io::BufWriter::new(file))?;
                }
                None => projection.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Recipe { name, list } => {
            if list || name.is_none() {
                for r in RECIPES {
                    println!("{r}");
                }
                return Ok(());
            }
            let cfg = recipe(name.as_deref().unwrap())?;
            std::io::stdout().write_all(cfg.to_toml()?.as_bytes())?;
        }
    }
    Ok(())
}
