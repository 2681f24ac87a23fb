//! Two-stage embedding projector: supervised LDA down to `c − 1`
//! dimensions, then PCA down to 2 for plotting.

use std::io::Write;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, sign_convention, solve_lower, solve_lower_transpose, symmetric_eigen};
use crate::model::Model;
use crate::tensor::{gemm, gemm_tn, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LdaResult {
    /// `[n × (c−1)]` projected features.
    pub features: Tensor,
    /// `[h × (c−1)]` projection matrix.
    pub matrix: Tensor,
    /// Ridge added to the within-class scatter.
    pub ridge: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// `[m × 2]` orthonormal principal axes (when `m ≥ 2`).
    pub matrix: Tensor,
    pub mean: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    /// Sample variances along the two axes (`n − 1` denominator).
    pub variances: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection2D {
    pub lda_matrix: Tensor,
    pub pca_matrix: Tensor,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Projection2D {
    /// `x,y,label,split` rows for external plotting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,label,split")?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            writeln!(w, "{},{},{},{}", p[0], p[1], l, self.split)?;
        }
        Ok(())
    }
}

/// Within- and between-class scatter matrices (`h×h`, unnormalised).
pub fn scatter_matrices(x: &Tensor, labels: &[usize], num_classes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, h) = x.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "scatter",
            left: x.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![0.0; num_classes * h];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::contract(format!("label {l} out of range")));
        }
        counts[l] += 1;
        for (m, &v) in means[l * h..(l + 1) * h].iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!("class {k} has no samples")));
    }
    let mut overall = vec![0.0; h];
    for k in 0..num_classes {
        for j in 0..h {
            overall[j] += means[k * h + j];
            means[k * h + j] /= counts[k] as f64;
        }
    }
    for v in &mut overall {
        *v /= n as f64;
    }

    let mut centred = vec![0.0; n * h];
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..h {
            centred[i * h + j] = x.row(i)[j] - means[l * h + j];
        }
    }
    let within = gemm_tn(&centred, &centred, n, h, h);

    let mut between = vec![0.0; h * h];
    for k in 0..num_classes {
        let d: Vec<f64> = (0..h).map(|j| means[k * h + j] - overall[j]).collect();
        let nk = counts[k] as f64;
        for a in 0..h {
            for b in 0..h {
                between[a * h + b] += nk * d[a] * d[b];
            }
        }
    }
    Ok((within, between))
}

/// Fisher ratio `wᵀS_b w / wᵀS_w w` of direction `w`.
pub fn fisher_ratio(x: &Tensor, labels: &[usize], num_classes: usize, direction: &[f64]) -> Result<f64> {
    let (within, between) = scatter_matrices(x, labels, num_classes)?;
    let quad = |m: &[f64]| {
        let h = direction.len();
        let mut s = 0.0;
        for a in 0..h {
            for b in 0..h {
                s += direction[a] * m[a * h + b] * direction[b];
            }
        }
        s
    };
    Ok(quad(&between) / quad(&within))
}

/// Top `c − 1` generalized eigenvectors of `(S_b, S_w + λI)` with
/// `λ = 1e-6·tr(S_w)/h`, via Cholesky whitening.
pub fn lda_reduce(embeddings: &Tensor, labels: &[usize], num_classes: usize) -> Result<LdaResult> {
    let (n, h) = embeddings.dims2()?;
    if num_classes < 2 {
        return Err(Error::contract("LDA needs at least two classes"));
    }
    let out = num_classes - 1;
    if n <= num_classes {
        return Err(Error::contract(format!(
            "LDA needs more samples ({n}) than classes ({num_classes})"
        )));
    }
    if h < out {
        return Err(Error::contract(format!(
            "embedding dimension {h} is below c - 1 = {out}"
        )));
    }
    let (mut within, between) = scatter_matrices(embeddings, labels, num_classes)?;
    let trace: f64 = (0..h).map(|i| within[i * h + i]).sum();
    let mut ridge = 1e-6 * trace / h as f64;
    if !(ridge > 0.0 && ridge.is_finite()) {
        ridge = 1e-12;
    }
    for i in 0..h {
        within[i * h + i] += ridge;
    }
    let l = cholesky(&within, h)?;
    // M = L⁻¹ S_b L⁻ᵀ, built as L⁻¹ (L⁻¹ S_b)ᵀ since S_b is symmetric.
    let y = solve_lower(&l, h, &between, h);
    let mut yt = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            yt[j * h + i] = y[i * h + j];
        }
    }
    let m = solve_lower(&l, h, &yt, h);
    let eig = symmetric_eigen(&m, h)?;

    let mut top = vec![0.0; h * out];
    for j in 0..out {
        for i in 0..h {
            top[i * out + j] = eig.vectors[i * h + j];
        }
    }
    let mut w = solve_lower_transpose(&l, h, &top, out);
    for j in 0..out {
        let col: Vec<f64> = (0..h).map(|i| w[i * out + j]).collect();
        let s = sign_convention(&col);
        for i in 0..h {
            w[i * out + j] *= s;
        }
    }
    let features = gemm(embeddings.data(), &w, n, h, out);
    Ok(LdaResult {
        features: Tensor::new(vec![n, out], features)?,
        matrix: Tensor::new(vec![h, out], w)?,
        ridge,
    })
}

/// Mean-centred projection onto the top two covariance eigenvectors.
/// One-dimensional input is padded with a zero-variance second axis.
pub fn pca_reduce(features: &Tensor) -> Result<PcaResult> {
    let (n, m) = features.dims2()?;
    if n < 2 {
        return Err(Error::contract("PCA needs at least two samples"));
    }
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (acc, &v) in mean.iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut centred = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            centred[i * m + j] = features.row(i)[j] - mean[j];
        }
    }
    let mut cov = gemm_tn(&centred, &centred, n, m, m);
    for v in &mut cov {
        *v /= (n - 1) as f64;
    }
    let (matrix, variances) = if m == 1 {
        (vec![1.0, 0.0], [cov[0], 0.0])
    } else {
        let eig = symmetric_eigen(&cov, m)?;
        let mut p = vec![0.0; m * 2];
        for i in 0..m {
            p[i * 2] = eig.vectors[i * m];
            p[i * 2 + 1] = eig.vectors[i * m + 1];
        }
        (p, [eig.values[0], eig.values[1]])
    };
    let coords = gemm(&centred, &matrix, n, m, 2);
    let points = coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(PcaResult {
        matrix: Tensor::new(vec![m, 2], matrix)?,
        mean,
        points,
        variances,
    })
}

/// Embeds `data` with `model`, then applies LDA and PCA.
pub fn project_embedding(model: &Model, data: &Dataset) -> Result<Projection2D> {
    let emb = model.embed(data.x())?;
    let lda = lda_reduce(&emb, data.y(), data.num_classes())?;
    let pca = pca_reduce(&lda.features)?;
    Ok(Projection2D {
        lda_matrix: lda.matrix,
        pca_matrix: pca.matrix,
        points: pca.points,
        labels: data.y().to_vec(),
        split: data.split(),
    })
}
