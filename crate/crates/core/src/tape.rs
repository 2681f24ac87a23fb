//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A forward pass records each primitive on a [`ComputationTape`]; a single
//! call to [`ComputationTape::backward`] then replays the adjoints in exact
//! reverse recording order and returns the gradient of every leaf that was
//! registered with `requires_grad = true`.
//!
//! ```
//! use advft::{ComputationTape, Tensor};
//!
//! let mut tape = ComputationTape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Conv3x3 {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations; consumed by one backward pass.
#[derive(Default)]
pub struct ComputationTape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the leaves that were registered with `requires_grad`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl ComputationTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `x[m×n] + bias[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = xv.dims2()?;
        if bv.len() != n {
            return Err(Error::Dimension {
                op: "add_row_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let value = Tensor::from_parts_unchecked(xv.shape().to_vec(), nn::add_row_bias(xv.data(), bv.data()));
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias(x, bias), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_parts_unchecked(xv.shape().to_vec(), nn::relu(xv.data()));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Same-padded 3×3 convolution over rows laid out as `[C, H, W]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var, geometry: ConvGeometry) -> Result<Var> {
        let (iv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let (batch, len) = iv.dims2()?;
        let wlen = geometry.out_channels * geometry.in_channels * 9;
        if len != geometry.input_len() || wv.len() != wlen || bv.len() != geometry.out_channels {
            return Err(Error::Dimension {
                op: "conv3x3",
                left: iv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let (out, cols) = nn::conv3x3_forward(iv.data(), wv.data(), bv.data(), batch, &geometry);
        let value = Tensor::from_parts_unchecked(vec![batch, geometry.output_len()], out);
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let cols = if needs { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv3x3 {
                input,
                weight,
                bias,
                geometry,
                cols,
            },
            needs,
        ))
    }

    /// Softmax cross-entropy of `logits[b×c]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.dims2()?;
        if rows != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (losses, probs) = nn::softmax_cross_entropy(lv.data(), classes, labels);
        let total = losses.iter().fold(0.0, |acc, &l| acc + l);
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / rows as f64,
        };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            needs,
        ))
    }

    /// Backward pass seeded with `dL/droot = 1`.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.backward_with_seed(root, 1.0)
    }

    /// Replays adjoints from a scalar `root`. The tape is consumed: a second
    /// call returns [`Error::Usage`].
    pub fn backward_with_seed(&mut self, root: Var, seed: f64) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward called on a consumed tape".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("root {} not recorded on this tape", root.0)));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(vec![seed]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }

        let grads = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(node, g)| {
                if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts_unchecked(shape, data),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.needs(*a) {
                    accumulate(adj, *a, gemm_nt(g, val(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, gemm_tn(val(*a).data(), g, m, k, n));
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
                if self.needs(*bias) {
                    accumulate(adj, *bias, nn::column_sums(g, val(*bias).len()));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(adj, *a, d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(adj, *b, d);
                }
            }
            Op::Scale(x, factor) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.iter().map(|&u| u * factor).collect());
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    accumulate(adj, *x, nn::relu_adjoint(val(*x).data(), g));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    accumulate(adj, *x, vec![g[0]; val(*x).len()]);
                }
            }
            Op::Conv3x3 {
                input,
                weight,
                bias,
                geometry,
                cols,
            } => {
                let batch = val(*input).shape()[0];
                let want = [self.needs(*input), self.needs(*weight), self.needs(*bias)];
                let d = nn::conv3x3_adjoint(g, cols, val(*weight).data(), batch, geometry, want);
                if let Some(v) = d.input {
                    accumulate(adj, *input, v);
                }
                if let Some(v) = d.weight {
                    accumulate(adj, *weight, v);
                }
                if let Some(v) = d.bias {
                    accumulate(adj, *bias, v);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                if self.needs(*logits) {
                    let classes = val(*logits).shape()[1];
                    let scale = match reduction {
                        Reduction::Sum => g[0],
                        Reduction::Mean => g[0] / labels.len() as f64,
                    };
                    let mut d = probs.clone();
                    for (row, &y) in d.chunks_exact_mut(classes).zip(labels) {
                        row[y] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(adj, *logits, d);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut adj[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Untraced matrix product helper used by model inference.
pub(crate) fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, k) = x.dims2()?;
    let (k2, n) = weight.dims2()?;
    if k != k2 || bias.len() != n {
        return Err(Error::Dimension {
            op: "dense",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let prod = gemm(x.data(), weight.data(), m, k, n);
    Ok(Tensor::from_parts_unchecked(vec![m, n], nn::add_row_bias(&prod, bias.data())))
}
