//! Classifier architectures: a layer stack over flat `[batch × features]` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};
use crate::rng::rng_from;
use crate::tape::{dense_forward, ComputationTape, Reduction, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    /// `y = x·W + b` with `W: [inputs × outputs]`.
    Dense { inputs: usize, outputs: usize },
    /// Same-padded 3×3 convolution, `W: [out × in × 3 × 3]`.
    Conv3x3(ConvGeometry),
    Relu,
    /// Rows are already flat; kept so layer stacks read like the usual CNN description.
    Flatten,
}

impl Layer {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Layer::Dense { inputs, outputs } => vec![vec![*inputs, *outputs], vec![*outputs]],
            Layer::Conv3x3(g) => vec![
                vec![g.out_channels, g.in_channels, 3, 3],
                vec![g.out_channels],
            ],
            Layer::Relu | Layer::Flatten => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// `input → hidden[0] → … → num_classes` with ReLU between dense layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            outputs: num_classes,
        });
        Architecture {
            input_dim,
            num_classes,
            layers,
        }
    }

    /// Two 3×3 conv + ReLU blocks, flatten, then a dense head.
    pub fn conv(in_channels: usize, height: usize, width: usize, channels: [usize; 2], num_classes: usize) -> Self {
        let first = ConvGeometry {
            in_channels,
            out_channels: channels[0],
            height,
            width,
        };
        let second = ConvGeometry {
            in_channels: channels[0],
            out_channels: channels[1],
            height,
            width,
        };
        Architecture {
            input_dim: first.input_len(),
            num_classes,
            layers: vec![
                Layer::Conv3x3(first),
                Layer::Relu,
                Layer::Conv3x3(second),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    inputs: second.output_len(),
                    outputs: num_classes,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Architecture("need at least two classes".into()));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { inputs, outputs } => {
                    if *inputs != width || *outputs == 0 {
                        return Err(Error::Architecture(format!(
                            "layer {i}: dense expects {inputs} inputs but receives {width}"
                        )));
                    }
                    width = *outputs;
                }
                Layer::Conv3x3(g) => {
                    if g.input_len() != width || g.output_len() == 0 {
                        return Err(Error::Architecture(format!(
                            "layer {i}: conv expects {} inputs but receives {width}",
                            g.input_len()
                        )));
                    }
                    width = g.output_len();
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        if width != self.num_classes {
            return Err(Error::Architecture(format!(
                "output width {width} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(Layer::param_shapes).collect()
    }

    /// Index of the classifier head (the last dense layer); everything before
    /// it produces the embedding.
    fn head_index(&self) -> Result<usize> {
        match self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
        {
            Some(0) | None => Err(Error::Architecture(
                "embedding needs at least one layer before the classifier head".into(),
            )),
            Some(i) => Ok(i),
        }
    }
}

/// Inputs in `[0, 1]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    x: Tensor,
    y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        let (rows, _) = x.dims2()?;
        if rows != y.len() {
            return Err(Error::Dimension {
                op: "batch",
                left: x.shape().to_vec(),
                right: vec![y.len()],
            });
        }
        if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("batch value {v} outside [0, 1]")));
        }
        Ok(Batch { x, y })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Result of a traced forward pass.
pub struct Traced {
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wrt {
    pub params: bool,
    pub input: bool,
}

#[derive(Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub param_grads: Option<Vec<Tensor>>,
    pub input_grad: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl Model {
    /// He-uniform weights (`U(±√(6/fan_in))`), zero biases.
    pub fn he_uniform(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = match shape.len() {
                    2 => shape[0],
                    _ => shape[1..].iter().product(),
                };
                let limit = (6.0 / fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::from_parts_unchecked(shape, data)
            })
            .collect();
        Ok(Model { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Model { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Architecture(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "from_params",
                    left: shape.clone(),
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(Model { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.arch.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.arch.input_dim],
            });
        }
        Ok(())
    }

    fn run_layers(&self, x: &Tensor, layers: std::ops::Range<usize>) -> Result<Tensor> {
        let mut p = self.arch.layers[..layers.start]
            .iter()
            .map(|l| l.param_shapes().len())
            .sum::<usize>();
        let mut h = x.clone();
        for layer in &self.arch.layers[layers] {
            h = match layer {
                Layer::Dense { .. } => {
                    let out = dense_forward(&h, &self.params[p], &self.params[p + 1])?;
                    p += 2;
                    out
                }
                Layer::Conv3x3(g) => {
                    let batch = h.dims2()?.0;
                    let (out, _) = nn::conv3x3_forward(
                        h.data(),
                        self.params[p].data(),
                        self.params[p + 1].data(),
                        batch,
                        g,
                    );
                    p += 2;
                    Tensor::from_parts_unchecked(vec![batch, g.output_len()], out)
                }
                Layer::Relu => Tensor::from_parts_unchecked(h.shape().to_vec(), nn::relu(h.data())),
                Layer::Flatten => h,
            };
        }
        Ok(h)
    }

    /// Untraced logits `[b × c]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.run_layers(x, 0..self.arch.layers.len())
    }

    /// Penultimate activations: the input of the final dense classifier.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let head = self.arch.head_index()?;
        self.check_input(x)?;
        self.run_layers(x, 0..head)
    }

    /// Applies the classifier head to embeddings produced by [`Model::embed`].
    pub fn head(&self, embedding: &Tensor) -> Result<Tensor> {
        let head = self.arch.head_index()?;
        self.run_layers(embedding, head..self.arch.layers.len())
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        let head = self.arch.head_index()?;
        match &self.arch.layers[head] {
            Layer::Dense { inputs, .. } => Ok(*inputs),
            _ => unreachable!("head index always points at a dense layer"),
        }
    }

    /// Records the forward pass of `x` on `tape`. Parameters are registered as
    /// leaves with `requires_grad = params_grad`.
    pub fn trace(&self, tape: &mut ComputationTape, x: Var, params_grad: bool) -> Result<Traced> {
        self.check_input(tape.value(x))?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), params_grad))
            .collect();
        let mut p = 0;
        let mut h = x;
        for layer in &self.arch.layers {
            h = match layer {
                Layer::Dense { .. } => {
                    let z = tape.matmul(h, params[p])?;
                    let out = tape.add_row_bias(z, params[p + 1])?;
                    p += 2;
                    out
                }
                Layer::Conv3x3(g) => {
                    let out = tape.conv3x3(h, params[p], params[p + 1], *g)?;
                    p += 2;
                    out
                }
                Layer::Relu => tape.relu(h),
                Layer::Flatten => h,
            };
        }
        Ok(Traced { logits: h, params })
    }

    /// Cross-entropy of `x` against `y` plus the requested gradients.
    pub fn loss_and_grad(&self, x: &Tensor, y: &[usize], reduction: Reduction, wrt: Wrt) -> Result<LossGrad> {
        let mut tape = ComputationTape::new();
        let xv = tape.leaf(x.clone(), wrt.input);
        let traced = self.trace(&mut tape, xv, wrt.params)?;
        let loss = tape.cross_entropy(traced.logits, y, reduction)?;
        let value = tape.value(loss).item()?;
        if !(wrt.params || wrt.input) {
            return Ok(LossGrad {
                loss: value,
                param_grads: None,
                input_grad: None,
            });
        }
        let mut grads = tape.backward(loss)?;
        let param_grads = wrt.params.then(|| {
            traced
                .params
                .iter()
                .map(|&v| grads.take(v).expect("parameter leaves require grad"))
                .collect()
        });
        let input_grad = if wrt.input { grads.take(xv) } else { None };
        Ok(LossGrad {
            loss: value,
            param_grads,
            input_grad,
        })
    }

    /// Mean cross-entropy on a batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        cross_entropy(&self.forward(batch.x())?, batch.y())
    }
}

/// Mean softmax cross-entropy of `logits[b×c]` against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let losses = cross_entropy_per_sample(logits, labels)?;
    Ok(losses.iter().fold(0.0, |acc, &l| acc + l) / losses.len() as f64)
}

pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (rows, classes) = logits.dims2()?;
    if rows != labels.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(nn::softmax_cross_entropy(logits.data(), classes, labels).0)
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[logits.shape().len() - 1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_mlp_gives_zero_logits() {
        let m = Model::zeros(Architecture::mlp(4, &[8, 5], 3)).unwrap();
        let logits = m.forward(&row(&[0.1, 0.9, 0.4, 0.3])).unwrap();
        assert_eq!(logits.data(), &[0.0; 3]);
    }

    #[test]
    fn identity_dense_layer_copies_input() {
        let arch = Architecture::mlp(3, &[], 3);
        let m = Model::from_params(arch, vec![Tensor::identity(3), Tensor::zeros(&[3])]).unwrap();
        let x = row(&[0.2, 0.5, 0.7]);
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn two_layer_mlp_matches_hand_evaluation() {
        // 2 → 2 → 2 with hand-picked weights, evaluated line by line.
        let arch = Architecture::mlp(2, &[2], 2);
        let w1 = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let b1 = Tensor::new(vec![2], vec![0.1, -0.3]).unwrap();
        let w2 = Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        let b2 = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let m = Model::from_params(arch, vec![w1, b1, w2, b2]).unwrap();
        let x = row(&[0.4, 0.2]);
        // h = relu([0.4*1 + 0.2*0.5 + 0.1, 0.4*-1 + 0.2*2 - 0.3]) = relu([0.6, -0.3]) = [0.6, 0]
        // z = [0.6*2 + 0, 0.6*0 + 0 + 0.5] = [1.2, 0.5]
        let z = m.forward(&x).unwrap();
        assert!((z.data()[0] - 1.2).abs() < 1e-15);
        assert!((z.data()[1] - 0.5).abs() < 1e-15);
        let h = m.embed(&x).unwrap();
        assert!((h.data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(h.data()[1], 0.0);
    }

    #[test]
    fn loss_closed_forms() {
        let l = cross_entropy(&row(&[0.0, 0.0]), &[0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = cross_entropy(&row(&[0.0; 7]), &[4]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-15);
        // softplus(-4) = ln(1 + e^-4)
        let l = cross_entropy(&row(&[3.0, -1.0]), &[0]).unwrap();
        let expected = (1.0 + (-4f64).exp()).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((expected - 0.01815).abs() < 1e-5);
    }

    #[test]
    fn loss_shift_invariance() {
        let a = cross_entropy(&row(&[0.3, -2.0, 1.1]), &[2]).unwrap();
        let b = cross_entropy(&row(&[100.3, 98.0, 101.1]), &[2]).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(matches!(cross_entropy(&row(&[0.0, 0.0]), &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_layer_model_has_no_embedding() {
        let m = Model::zeros(Architecture::mlp(3, &[], 2)).unwrap();
        assert!(matches!(m.embed(&row(&[0.0; 3])), Err(Error::Architecture(_))));
    }

    #[test]
    fn embed_then_head_reproduces_logits() {
        let m = Model::he_uniform(Architecture::mlp(6, &[16, 8], 3), 3).unwrap();
        let x = Tensor::new(vec![4, 6], (0..24).map(|i| (i as f64 * 0.37) % 1.0).collect()).unwrap();
        let logits = m.forward(&x).unwrap();
        let emb = m.embed(&x).unwrap();
        assert_eq!(emb.shape(), &[4, 8]);
        let again = m.head(&emb).unwrap();
        for (a, b) in logits.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_architecture_composes() {
        let arch = Architecture::conv(1, 4, 4, [2, 3], 2);
        arch.validate().unwrap();
        let m = Model::he_uniform(arch, 1).unwrap();
        assert_eq!(m.embedding_dim().unwrap(), 3 * 16);
        let x = Tensor::filled(&[2, 16], 0.5);
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn mismatched_input_is_a_dimension_error() {
        let m = Model::zeros(Architecture::mlp(3, &[4], 2)).unwrap();
        assert!(matches!(m.forward(&row(&[0.0; 5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_rejects_out_of_range_values() {
        assert!(Batch::new(row(&[0.5, 1.5]), vec![0]).is_err());
        assert!(Batch::new(row(&[0.5, 1.0]), vec![0]).is_ok());
    }
}
