//! Forward/adjoint kernels shared by the traced and untraced model paths.
//! Both paths call the same functions, so traced and untraced logits agree
//! bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm_nt, gemm_tn, gemm};

/// Shape of a same-padded, stride-1, 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    fn patch_len(&self) -> usize {
        self.in_channels * 9
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

pub(crate) fn add_row_bias(x: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = bias.len();
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

/// Column sums of a row-major `[rows × n]` buffer.
pub(crate) fn column_sums(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in x.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub(crate) fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_adjoint(input: &[f64], upstream: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(upstream)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

fn im2col(input: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let (h, w) = (g.height as isize, g.width as isize);
    let patch = g.patch_len();
    let plane = g.plane();
    let mut cols = vec![0.0; batch * plane * patch];
    for b in 0..batch {
        let sample = &input[b * g.input_len()..(b + 1) * g.input_len()];
        for y in 0..h {
            for x in 0..w {
                let row = (b * plane) + (y * w + x) as usize;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for c in 0..g.in_channels {
                    let channel = &sample[c * plane..(c + 1) * plane];
                    for ky in 0..3isize {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..3isize {
                            let sx = x + kx - 1;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            dst[c * 9 + (ky * 3 + kx) as usize] = channel[(sy * w + sx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let (h, w) = (g.height as isize, g.width as isize);
    let patch = g.patch_len();
    let plane = g.plane();
    let mut out = vec![0.0; batch * g.input_len()];
    for b in 0..batch {
        let sample = &mut out[b * g.input_len()..(b + 1) * g.input_len()];
        for y in 0..h {
            for x in 0..w {
                let row = (b * plane) + (y * w + x) as usize;
                let src = &cols[row * patch..(row + 1) * patch];
                for c in 0..g.in_channels {
                    for ky in 0..3isize {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..3isize {
                            let sx = x + kx - 1;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            sample[c * plane + (sy * w + sx) as usize] +=
                                src[c * 9 + (ky * 3 + kx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(output [batch × O·H·W], im2col buffer)`; the buffer is kept
/// for the adjoint pass.
pub(crate) fn conv3x3_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    batch: usize,
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, batch, g);
    let plane = g.plane();
    let o = g.out_channels;
    let prod = gemm_nt(&cols, weight, batch * plane, g.patch_len(), o);
    let mut out = vec![0.0; batch * g.output_len()];
    for b in 0..batch {
        for p in 0..plane {
            let src = &prod[(b * plane + p) * o..(b * plane + p + 1) * o];
            for (oc, &v) in src.iter().enumerate() {
                out[b * g.output_len() + oc * plane + p] = v + bias[oc];
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvAdjoint {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv3x3_adjoint(
    upstream: &[f64],
    cols: &[f64],
    weight: &[f64],
    batch: usize,
    g: &ConvGeometry,
    want: [bool; 3],
) -> ConvAdjoint {
    let plane = g.plane();
    let o = g.out_channels;
    // [batch·plane × O] layout matching the im2col rows.
    let mut d = vec![0.0; batch * plane * o];
    for b in 0..batch {
        for oc in 0..o {
            let src = &upstream[b * g.output_len() + oc * plane..b * g.output_len() + (oc + 1) * plane];
            for (p, &v) in src.iter().enumerate() {
                d[(b * plane + p) * o + oc] = v;
            }
        }
    }
    let input = want[0].then(|| {
        let dcols = gemm(&d, weight, batch * plane, o, g.patch_len());
        col2im(&dcols, batch, g)
    });
    let weight_grad = want[1].then(|| gemm_tn(&d, cols, batch * plane, o, g.patch_len()));
    let bias = want[2].then(|| column_sums(&d, o));
    ConvAdjoint {
        input,
        weight: weight_grad,
        bias,
    }
}

/// Log-sum-exp stabilised softmax cross-entropy per row.
/// Returns `(per-row losses, softmax probabilities)`.
pub(crate) fn softmax_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut losses = Vec::with_capacity(labels.len());
    let mut probs = vec![0.0; logits.len()];
    for (i, (row, &y)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            probs[i * classes + j] = e;
            denom += e;
        }
        for p in &mut probs[i * classes..(i + 1) * classes] {
            *p /= denom;
        }
        losses.push(max + denom.ln() - row[y]);
    }
    (losses, probs)
}
