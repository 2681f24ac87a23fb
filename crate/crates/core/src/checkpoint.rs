//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ADVFTCKP" | version u32 | header_len u32 | header JSON
//! tensor block: params | tensor block: first moments | tensor block: second moments
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! A tensor block is `count u32` followed by, per tensor, `ndim u32`,
//! `ndim × u64` dims and the `f64` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVFTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    optimizer: Option<OptimizerKind>,
    optimizer_step: u64,
    seed: u64,
    epochs_completed: usize,
    provenance: String,
}

/// A model plus whatever is needed to resume or audit it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    /// Seed of the run that produced the weights.
    pub seed: u64,
    pub epochs_completed: usize,
    /// Free text, e.g. "pretrained externally".
    pub provenance: String,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            seed: 0,
            epochs_completed: 0,
            provenance: String::new(),
        }
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerState) -> Self {
        self.optimizer = Some(optimizer);
        self
    }

    pub fn with_provenance(mut self, note: impl Into<String>) -> Self {
        self.provenance = note.into();
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            architecture: self.model.architecture().clone(),
            optimizer: self.optimizer.as_ref().map(|o| o.kind().clone()),
            optimizer_step: self.optimizer.as_ref().map_or(0, OptimizerState::step_count),
            seed: self.seed,
            epochs_completed: self.epochs_completed,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::contract(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        write_block(&mut out, self.model.params());
        let (first, second) = match &self.optimizer {
            Some(o) => (o.first_moments(), o.second_moments()),
            None => (&[][..], &[][..]),
        };
        write_block(&mut out, first);
        write_block(&mut out, second);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < DIGEST_LEN + r.pos {
            return Err(Error::format(bytes.len(), "truncated checkpoint"));
        }
        let body_end = bytes.len() - DIGEST_LEN;
        if Sha256::digest(&bytes[..body_end])[..] != bytes[body_end..] {
            return Err(Error::Checksum);
        }
        r.bytes = &bytes[..body_end];

        let header_len = r.u32()? as usize;
        let header_at = r.pos;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::format(header_at, format!("bad header: {e}")))?;
        let params = r.block()?;
        let first = r.block()?;
        let second = r.block()?;
        if r.pos != r.bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes before checksum"));
        }
        let model = Model::from_params(header.architecture, params)?;
        let optimizer = match header.optimizer {
            Some(kind) => Some(OptimizerState::from_parts(kind, first, second, header.optimizer_step)?),
            None if first.is_empty() && second.is_empty() => None,
            None => return Err(Error::format(header_at, "optimizer buffers without optimizer kind")),
        };
        Ok(Checkpoint {
            model,
            optimizer,
            seed: header.seed,
            epochs_completed: header.epochs_completed,
            provenance: header.provenance,
        })
    }
}

fn write_block(out: &mut Vec<u8>, tensors: &[Tensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<Vec<Tensor>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let at = self.pos;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(usize::try_from(self.u64()?).map_err(|_| Error::format(at, "dimension overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(at, "tensor size overflow"))?;
            let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::format(at, "tensor size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?);
        }
        Ok(out)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
