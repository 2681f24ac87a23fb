//! Clean and robust accuracy, per-epoch metrics rows, and overfitting gaps.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_from_row, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_per_sample, predict, Batch, Model};

/// Rows per evaluation chunk.
const EVAL_CHUNK: usize = 512;

/// Column order of `metrics.csv`. Bump [`METRICS_CSV_VERSION`] when it changes.
pub const METRICS_COLUMNS: [&str; 8] = [
    "epoch",
    "lr",
    "clean_train_acc",
    "clean_test_acc",
    "robust_train_acc",
    "robust_test_acc",
    "train_loss",
    "adv_test_loss",
];
pub const METRICS_CSV_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub clean_train_acc: f64,
    pub clean_test_acc: f64,
    pub robust_train_acc: f64,
    pub robust_test_acc: f64,
    /// Mean loss over the batches the optimizer actually saw.
    pub train_loss: f64,
    pub adv_test_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub clean_acc: f64,
    pub clean_loss: f64,
    pub robust_acc: Option<f64>,
    pub robust_loss: Option<f64>,
}

/// Clean accuracy, plus accuracy on PGD-attacked inputs when `attack` is given.
pub fn evaluate(model: &Model, data: &Dataset, attack: Option<&AttackConfig>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let n = data.len();
    let (mut clean_hits, mut clean_loss) = (0usize, 0.0);
    let (mut adv_hits, mut adv_loss) = (0usize, 0.0);
    let all: Vec<usize> = (0..n).collect();
    for (c, idx) in all.chunks(EVAL_CHUNK).enumerate() {
        let batch = data.batch(idx)?;
        let logits = model.forward(batch.x())?;
        clean_hits += hits(&predict(&logits), batch.y());
        clean_loss = cross_entropy_per_sample(&logits, batch.y())?
            .iter()
            .fold(clean_loss, |acc, &l| acc + l);
        if let Some(cfg) = attack {
            let result = pgd_from_row(model, &batch, cfg, c * EVAL_CHUNK)?;
            let adv_logits = model.forward(&result.x_adv)?;
            adv_hits += hits(&predict(&adv_logits), batch.y());
            adv_loss = result.losses.iter().fold(adv_loss, |acc, &l| acc + l);
        }
    }
    let nf = n as f64;
    Ok(Evaluation {
        clean_acc: clean_hits as f64 / nf,
        clean_loss: clean_loss / nf,
        robust_acc: attack.map(|_| adv_hits as f64 / nf),
        robust_loss: attack.map(|_| adv_loss / nf),
    })
}

/// Accuracy of `model` on an already-formed batch.
pub fn batch_accuracy(model: &Model, batch: &Batch) -> Result<f64> {
    let logits = model.forward(batch.x())?;
    Ok(hits(&predict(&logits), batch.y()) as f64 / batch.len() as f64)
}

fn hits(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(p, t)| p == t).count()
}

/// `robust_train_acc − robust_test_acc` per epoch.
pub fn gap_series(metrics: &[MetricsRow]) -> Vec<f64> {
    metrics
        .iter()
        .map(|m| m.robust_train_acc - m.robust_test_acc)
        .collect()
}

/// Index of the row with the highest robust test accuracy (first on ties).
pub fn best_epoch(metrics: &[MetricsRow]) -> Option<usize> {
    metrics
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, m)| match best {
            Some((_, v)) if v >= m.robust_test_acc => best,
            _ => Some((i, m.robust_test_acc)),
        })
        .map(|(i, _)| i)
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.clean_train_acc,
            r.clean_test_acc,
            r.robust_train_acc,
            r.robust_test_acc,
            r.train_loss,
            r.adv_test_loss
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(r: R) -> Result<Vec<MetricsRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != METRICS_COLUMNS.join(",") {
        return Err(Error::format(0, format!("unexpected metrics header `{header}`")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(lineno + 1, format!("malformed metrics line `{line}`"));
        if fields.len() != METRICS_COLUMNS.len() {
            return Err(bad());
        }
        let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
        rows.push(MetricsRow {
            epoch: fields[0].parse().map_err(|_| bad())?,
            lr: f(1)?,
            clean_train_acc: f(2)?,
            clean_test_acc: f(3)?,
            robust_train_acc: f(4)?,
            robust_test_acc: f(5)?,
            train_loss: f(6)?,
            adv_test_loss: f(7)?,
        });
    }
    Ok(rows)
}
