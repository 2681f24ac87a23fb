mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advft::config::{DatasetSpec, ModelSpec, Phase};
use advft::{AttackConfig, ExperimentConfig, FinetuneConfig, GaussianSpec, OptimizerKind, ScheduleSpec, TrainConfig};
use common::{bin, tempdir};

fn advft(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove(advft::config::OUTPUT_ROOT_ENV);
    if let Some(root) = root {
        cmd.env(advft::config::OUTPUT_ROOT_ENV, root);
    }
    cmd.output().unwrap()
}

fn files_named(dir: &Path, name: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            found.extend(files_named(&path, name));
        } else if path.file_name().unwrap() == name {
            found.push(path);
        }
    }
    found.sort();
    found
}

fn small_config(phases: Vec<Phase>) -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        output_dir: "runs/cli".into(),
        dataset: DatasetSpec::Gaussian(GaussianSpec::two_class(50, 50, 1.0, 0.5, 5, 2)),
        model: ModelSpec::Mlp { hidden: vec![12] },
        phases,
    }
}

fn pretrain_phase() -> Phase {
    Phase::Pretrain {
        name: "pretrain".into(),
        init: None,
        train: TrainConfig {
            epochs: 3,
            batch_size: 10,
            schedule: ScheduleSpec::Constant { base_lr: 0.05 },
            optimizer: OptimizerKind::sgd_default(),
            attack: None,
            eval_attack: AttackConfig::pgd(0.05, 3),
            seed: 0,
            shuffle: true,
            clean_fraction: 0.0,
            eval_train_limit: None,
        },
    }
}

fn finetune_phase(init: &str) -> Phase {
    Phase::AdvFinetune {
        name: "aft".into(),
        init: init.into(),
        finetune: FinetuneConfig::new(
            AttackConfig::pgd(0.05, 3).with_init(advft::InitMode::Uniform),
            AttackConfig::pgd(0.05, 3),
            10,
        ),
    }
}

fn write(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn aft_demo_writes_three_checkpoints_and_two_metrics_files() {
    let root = tempdir();
    let out = advft(&["run", "--recipe", "aft-demo"], Some(root.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = root.path().join("runs/aft-demo");
    assert_eq!(files_named(&run, "model.ckpt").len(), 3);
    assert_eq!(files_named(&run, "metrics.csv").len(), 2);
    assert!(run.join("evaluate/eval.json").is_file());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["phases"].as_array().unwrap().len(), 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Clean") && stdout.contains("finetune"), "{stdout}");
}

#[test]
fn empty_phase_list_writes_only_the_manifest_and_config() {
    let dir = tempdir();
    let config = write(dir.path(), "empty.toml", &small_config(vec![]));
    let run = dir.path().join("run");
    let out = advft(&["run", config.to_str().unwrap(), "--out", run.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut entries: Vec<String> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, ["config.toml", "manifest.json"]);
}

#[test]
fn invalid_config_exits_nonzero_and_names_the_field() {
    let dir = tempdir();
    let mut cfg = small_config(vec![pretrain_phase()]);
    if let Phase::Pretrain { train, .. } = &mut cfg.phases[0] {
        train.batch_size = 0;
    }
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    let out = advft(&["run", path.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    std::fs::write(&path, "seed = 1\nbogus = 2\n").unwrap();
    assert!(!advft(&["run", path.to_str().unwrap()], None).status.success());
    assert!(!advft(&["run", "--recipe", "no-such-recipe"], None).status.success());
}

#[test]
fn recipes_print_as_loadable_toml() {
    let list = advft(&["recipe", "--list"], None);
    let names = String::from_utf8(list.stdout).unwrap();
    assert_eq!(names.lines().count(), advft::recipes::RECIPES.len());
    for name in names.lines() {
        let out = advft(&["recipe", name], None);
        assert!(out.status.success());
        let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
        assert_eq!(cfg, advft::recipes::recipe(name).unwrap());
    }
}

#[test]
fn eval_and_project_read_checkpoints() {
    let dir = tempdir();
    let cfg = small_config(vec![pretrain_phase()]);
    let config = write(dir.path(), "cfg.toml", &cfg);
    let run = dir.path().join("run");
    assert!(advft(&["run", config.to_str().unwrap(), "--out", run.to_str().unwrap()], None).status.success());
    let ckpt = run.join("pretrain/model.ckpt");

    let out = advft(
        &["eval", ckpt.to_str().unwrap(), "--eps", "0.05", "--steps", "5", "--data", config.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["samples"], 100);
    assert!(record["robust_acc"].as_f64().unwrap() <= record["clean_acc"].as_f64().unwrap());

    let csv = dir.path().join("map.csv");
    let out = advft(
        &["project", ckpt.to_str().unwrap(), config.to_str().unwrap(), "--out", csv.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,label,split"));
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn checkpoint_handoff_between_processes_matches_a_single_run() {
    let dir = tempdir();
    let single = write(dir.path(), "single.toml", &small_config(vec![pretrain_phase(), finetune_phase("pretrain")]));
    let first = write(dir.path(), "first.toml", &small_config(vec![pretrain_phase()]));
    let (run_single, run_first, run_second) = (dir.path().join("single"), dir.path().join("first"), dir.path().join("second"));
    let handoff = run_first.join("pretrain/model.ckpt");
    let second = write(
        dir.path(),
        "second.toml",
        &small_config(vec![finetune_phase(handoff.to_str().unwrap())]),
    );
    for (cfg, out) in [(&single, &run_single), (&first, &run_first), (&second, &run_second)] {
        let o = advft(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(run_single.join("aft/metrics.csv")), read(run_second.join("aft/metrics.csv")));
    assert_eq!(
        read(run_single.join("pretrain/metrics.csv")),
        read(run_first.join("pretrain/metrics.csv"))
    );
}

#[test]
fn corrupted_checkpoint_is_rejected_by_the_cli() {
    let dir = tempdir();
    let config = write(dir.path(), "cfg.toml", &small_config(vec![pretrain_phase()]));
    let run = dir.path().join("run");
    assert!(advft(&["run", config.to_str().unwrap(), "--out", run.to_str().unwrap()], None).status.success());
    let ckpt = run.join("pretrain/model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = advft(
        &["eval", ckpt.to_str().unwrap(), "--eps", "0.05", "--data", config.to_str().unwrap()],
        None,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("checksum"));
}
