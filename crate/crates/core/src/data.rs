//! Datasets: IDX image files, the two-class Gaussian generator, and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Affine map applied to raw values: `mapped = raw·scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

impl AffineMap {
    pub fn apply(&self, raw: f64) -> f64 {
        raw * self.scale + self.offset
    }

    pub fn invert(&self, mapped: f64) -> f64 {
        (mapped - self.offset) / self.scale
    }
}

/// Labelled samples with every feature in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    num_classes: usize,
    split: Split,
    /// `(channels, height, width)` when rows are images.
    image_shape: Option<[usize; 3]>,
    map: Option<AffineMap>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n != y.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: x.shape().to_vec(),
                right: vec![y.len()],
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("dataset features must lie in [0, 1]"));
        }
        Ok(Dataset {
            x,
            y,
            num_classes,
            split,
            image_shape: None,
            map: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_image_shape(mut self, shape: [usize; 3]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.dim() {
            return Err(Error::contract(format!(
                "image shape {shape:?} does not match feature dimension {}",
                self.dim()
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
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

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.image_shape
    }

    /// The raw→`[0, 1]` map used by generated data.
    pub fn affine_map(&self) -> Option<AffineMap> {
        self.map
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let x = self.x.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Batch::new(x, y)
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = (0..n).collect();
        let mut out = self.clone();
        out.x = self.x.select_rows(&idx)?;
        out.y.truncate(n);
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }
}

/// Partition of `0..n` into batches of `batch_size` (the last may be short),
/// shuffled with a ChaCha8 stream keyed by `seed` when `shuffle` is set.
pub fn batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng_from(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches for `epoch` of a run seeded with `seed`; the shuffle stream is
/// `derive_seed(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    batches(n, batch_size, derive_seed(seed, epoch as u64), shuffle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub per_class: usize,
    pub test_per_class: usize,
    /// Half the distance between the class means, along the first axis.
    pub mu: f64,
    pub sigma: f64,
    pub dim: usize,
    pub seed: u64,
    /// Class count; class `k` is centred at `±μ` on axis `k / 2`
    /// (negative for even `k`). Two classes reproduce `N(∓μ·e₁, σ²I)`.
    #[serde(default = "GaussianSpec::default_classes")]
    pub classes: usize,
    /// Raw values in `[−(μ + envelope·σ), μ + envelope·σ]` map onto `[0, 1]`;
    /// anything outside is clamped.
    #[serde(default = "GaussianSpec::default_envelope")]
    pub envelope: f64,
}

impl GaussianSpec {
    fn default_classes() -> usize {
        2
    }

    fn default_envelope() -> f64 {
        4.0
    }

    pub fn two_class(per_class: usize, test_per_class: usize, mu: f64, sigma: f64, dim: usize, seed: u64) -> Self {
        GaussianSpec {
            per_class,
            test_per_class,
            mu,
            sigma,
            dim,
            seed,
            classes: 2,
            envelope: Self::default_envelope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config("mu", "must be > 0"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be > 0"));
        }
        if self.dim == 0 || self.per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("dim", "dim and sample counts must be >= 1"));
        }
        if !(self.envelope > 0.0 && self.envelope.is_finite()) {
            return Err(Error::config("envelope", "must be > 0"));
        }
        if self.classes < 2 || self.classes > 2 * self.dim {
            return Err(Error::config("classes", "must lie in [2, 2·dim]"));
        }
        Ok(())
    }

    /// `[−(μ+kσ), μ+kσ] → [0, 1]` with `k = envelope`, shared by every
    /// coordinate and both splits.
    pub fn affine_map(&self) -> AffineMap {
        let half = self.mu + self.envelope * self.sigma;
        AffineMap {
            scale: 0.5 / half,
            offset: 0.5,
        }
    }
}

/// Two classes `N(∓μ·e₁, σ²I)` mapped into `[0, 1]`; samples cycle through
/// the classes so both splits are balanced.
pub fn gaussian2(spec: &GaussianSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let map = spec.affine_map();
    let make = |per_class: usize, stream: u64, split: Split| -> Result<Dataset> {
        let mut rng = rng_from(derive_seed(spec.seed, stream));
        let n = spec.classes * per_class;
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % spec.classes;
            let axis = label / 2;
            let centre = if label.is_multiple_of(2) { -spec.mu } else { spec.mu };
            for j in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                let raw = spec.sigma * z + if j == axis { centre } else { 0.0 };
                data.push(map.apply(raw).clamp(0.0, 1.0));
            }
            labels.push(label);
        }
        let mut ds = Dataset::new(Tensor::new(vec![n, spec.dim], data)?, labels, spec.classes, split)?;
        ds.map = Some(map);
        Ok(ds)
    };
    Ok((
        make(spec.per_class, 0, Split::Train)?,
        make(spec.test_per_class, 1, Split::Test)?,
    ))
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset, format!("truncated header: missing {what}")))
}

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic 0x{magic:08x}")));
    }
    let n = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            16 + body.len(),
            format!("truncated pixel data: expected {need} bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format(16 + need, "trailing bytes after pixel data"));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic 0x{magic:08x}")));
    }
    let n = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            8 + body.len(),
            format!("truncated label data: expected {n} bytes, found {}", body.len()),
        ));
    }
    if body.len() > n {
        return Err(Error::format(8 + n, "trailing bytes after label data"));
    }
    Ok(body)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 || !pixels.len().is_multiple_of(rows * cols) {
        return Err(Error::contract("pixel buffer is not a whole number of images"));
    }
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(images: &Path, labels: &Path, rows: usize, cols: usize, pixels: &[u8], label_bytes: &[u8]) -> Result<()> {
    std::fs::write(images, encode_idx_images(rows, cols, pixels)?).map_err(|e| Error::file(images, e))?;
    std::fs::write(labels, encode_idx_labels(label_bytes)).map_err(|e| Error::file(labels, e))?;
    Ok(())
}

/// Decodes an images/labels pair; pixels are scaled by `1/255`.
pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(
            4,
            format!("label count {} does not match image count {n}", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::format(4, "IDX files contain no samples"));
    }
    let x = Tensor::new(
        vec![n, rows * cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let y: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = (y.iter().copied().max().unwrap_or(0) + 1).max(2);
    Dataset::new(x, y, num_classes, Split::Train)?.with_image_shape([1, rows, cols])
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images).map_err(|e| Error::file(images, e))?;
    let label_bytes = std::fs::read(labels).map_err(|e| Error::file(labels, e))?;
    decode_idx(&image_bytes, &label_bytes)
}
