#![allow(dead_code)]

use std::path::{Path, PathBuf};

use advft::eval::read_metrics_csv;
use advft::model::Wrt;
use advft::{Architecture, Batch, MetricsRow, Model, Reduction, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between analytic and central-difference gradients,
/// plus how many coordinates were skipped because a ReLU kink lay inside
/// the difference stencil.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub worst: f64,
    pub checked: usize,
    pub kinks: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Scores one coordinate given `f(θ−h)`, `f(θ)`, `f(θ+h)`. A kink shows up as
/// disagreeing one-sided slopes; such coordinates are not gradient errors.
fn score(analytic: f64, lo: f64, mid: f64, hi: f64, report: &mut FdReport) {
    let central = (hi - lo) / (2.0 * FD_STEP);
    let err = rel_err(analytic, central);
    if err > 1e-6 {
        let (fwd, bwd) = ((hi - mid) / FD_STEP, (mid - lo) / FD_STEP);
        if rel_err(fwd, bwd) > 1e-3 {
            report.kinks += 1;
            return;
        }
    }
    report.worst = report.worst.max(err);
    report.checked += 1;
}

pub fn fd_check(model: &Model, x: &Tensor, y: &[usize]) -> FdReport {
    let wrt = Wrt {
        params: true,
        input: true,
    };
    let g = model.loss_and_grad(x, y, Reduction::Mean, wrt).unwrap();
    let batch = |x: &Tensor| Batch::new(x.clone(), y.to_vec()).unwrap();
    let base = model.loss(&batch(x)).unwrap();
    let mut report = FdReport::default();

    let param_grads = g.param_grads.unwrap();
    for (pi, grad) in param_grads.iter().enumerate() {
        for j in 0..grad.len() {
            let shifted = |d: f64| {
                let mut m = model.clone();
                m.params_mut()[pi].data_mut()[j] += d;
                m.loss(&batch(x)).unwrap()
            };
            score(grad.data()[j], shifted(-FD_STEP), base, shifted(FD_STEP), &mut report);
        }
    }

    let input_grad = g.input_grad.unwrap();
    for j in 0..x.len() {
        let shifted = |d: f64| {
            let mut xs = x.clone();
            xs.data_mut()[j] += d;
            model.loss(&batch(&xs)).unwrap()
        };
        score(input_grad.data()[j], shifted(-FD_STEP), base, shifted(FD_STEP), &mut report);
    }
    report
}

/// Small random MLP or conv model with a matching batch in `[0.05, 0.95]`.
pub fn random_model_and_batch(rng: &mut ChaCha8Rng, conv: bool) -> (Model, Tensor, Vec<usize>) {
    let classes = rng.gen_range(2..=4);
    let arch = if conv {
        let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=5), rng.gen_range(3..=5));
        Architecture::conv(c, h, w, [rng.gen_range(1..=3), rng.gen_range(1..=3)], classes)
    } else {
        let d = rng.gen_range(2..=6);
        let depth = rng.gen_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=8)).collect();
        Architecture::mlp(d, &hidden, classes)
    };
    let mut model = Model::he_uniform(arch, rng.gen()).unwrap();
    // Nonzero biases so ReLU patterns are not tied to the origin.
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    let n = rng.gen_range(1..=4);
    let d = model.input_dim();
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
    let y = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (model, x, y)
}

pub fn read_metrics(path: &Path) -> Vec<MetricsRow> {
    let file = std::fs::File::open(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    read_metrics_csv(std::io::BufReader::new(file)).unwrap()
}

pub fn sha256_file(path: &Path) -> String {
    advft::runner::sha256_hex(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
}

/// Result line in the format the acceptance target reports.
pub fn verdict(criterion: usize, pass: bool, detail: impl AsRef<str>) -> bool {
    println!(
        "criterion {criterion:>2}: {} {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    pass
}

pub fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_advft"))
}
