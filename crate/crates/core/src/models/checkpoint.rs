//! Binary checkpoint format.
//!
//! ```text
//! "P3TL" | u32 version | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 rank | u32 dims... | f32 values...
//! u32 CRC32 of everything above
//! u32 provenance length | provenance (UTF-8 JSON)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Architecture, Model, ModelError};
use crate::tensor::{Param, Tensor};

pub const MAGIC: &[u8; 4] = b"P3TL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("tensor {name}: shape mismatch, model expects {expected:?} but checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has tensor {0} the model does not declare")]
    UnexpectedTensor(String),
    #[error("invalid tensor record {name}: {msg}")]
    BadTensor { name: String, msg: String },
    #[error("invalid provenance: {0}")]
    Provenance(String),
    #[error("{0} trailing bytes after provenance")]
    TrailingBytes(usize),
}

/// Where a set of weights came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub architecture: Architecture,
    /// `random`, `supervised`, `point-contrastive`, `shape-contrastive`,
    /// or `finetuned:<inner>`.
    pub pretraining: String,
    pub regularized_layers: Vec<String>,
    pub lambda: f64,
    pub seed: u64,
    pub config_hash: String,
    pub dataset: String,
}

impl Provenance {
    pub fn random(arch: &Architecture, seed: u64) -> Self {
        Self {
            architecture: arch.clone(),
            pretraining: "random".into(),
            regularized_layers: Vec::new(),
            lambda: 0.0,
            seed,
            config_hash: String::new(),
            dataset: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub provenance: Provenance,
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    let prov = serde_json::to_vec(&model.provenance).expect("provenance serializes");
    out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    out.extend_from_slice(&prov);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { what, offset: self.pos });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8_lossy(r.take(len, "tensor name")?).into_owned();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let size = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated { what: "tensor values", offset: r.pos })?;
        let raw = r.take(size, "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::BadTensor {
            name: name.clone(),
            msg: e.to_string(),
        })?;
        tensors.push((name, t));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let plen = r.u32("provenance length")? as usize;
    let prov = r.take(plen, "provenance")?;
    let provenance = serde_json::from_slice(prov).map_err(|e| CheckpointError::Provenance(e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Checkpoint { tensors, provenance })
}

impl Model<f32> {
    /// Copies checkpoint tensors into this model, which must declare exactly
    /// the same names and shapes.
    pub fn load_weights(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        for (name, _) in &ckpt.tensors {
            if self.param_index(name).is_none() {
                return Err(CheckpointError::UnexpectedTensor(name.clone()));
            }
        }
        let mut values = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let (_, t) = ckpt
                .tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| CheckpointError::MissingTensor(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            values.push(t.clone());
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            *p = Param::new(p.name.clone(), v);
        }
        self.provenance = ckpt.provenance.clone();
        Ok(())
    }

    /// Rebuilds the model declared by the checkpoint's provenance.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut model = Model::new(ckpt.provenance.architecture.clone(), 0);
        model.load_weights(ckpt)?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        }
        .into()
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, ModelError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(Model::from_checkpoint(&decode_checkpoint(&bytes)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BackboneKind;

    fn model(kind: BackboneKind) -> Model<f32> {
        Model::new(Architecture::new(kind, 8), 3)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model(BackboneKind::EdgeconvGraph);
        let a = encode_checkpoint(&m);
        let back = Model::from_checkpoint(&decode_checkpoint(&a).unwrap()).unwrap();
        assert_eq!(encode_checkpoint(&back), a);
        assert_eq!(&a[..4], b"P3TL");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&model(BackboneKind::GlobalPointnet));
        let mut bad = bytes.clone();
        bad[100] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::Checksum { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::Version { found: 9, .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_backbone_is_a_shape_mismatch() {
        let ckpt = decode_checkpoint(&encode_checkpoint(&model(BackboneKind::GlobalPointnet))).unwrap();
        let mut edge = model(BackboneKind::EdgeconvGraph);
        let err = edge.load_weights(&ckpt).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch { name, expected, found } => {
                assert_eq!(name, "layer0.weight");
                assert_eq!(expected, vec![6, 32]);
                assert_eq!(found, vec![3, 32]);
            }
            other => panic!("{other}"),
        }
    }
}
