//! Versioned binary tensor container.
//!
//! Layout: 8-byte magic `CIRLCKPT`, `u32` format version, `u64` header
//! length, a JSON header, then the little-endian payload of every tensor in
//! header order.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CirlError, Result};
use crate::models::{CirlModel, ModelSpec};
use crate::nn::{TensorVisitor, TensorVisitorMut};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"CIRLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub spec: Option<ModelSpec>,
    pub step: u64,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: Header,
    payload: Vec<u8>,
}

impl TensorFile {
    /// Snapshots every tensor the visitor yields.
    pub fn capture<F: Real>(spec: Option<ModelSpec>, step: u64, visit: impl FnOnce(&mut TensorVisitor<'_, F>)) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        visit(&mut |name, t| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for &v in t.iter() {
                v.write_le(&mut payload);
            }
        });
        Self {
            header: Header {
                dtype: F::DTYPE.to_string(),
                spec,
                step,
                metadata: serde_json::Value::Null,
                tensors,
            },
            payload,
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.header.metadata = metadata;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CirlError::Load("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CirlError::Load(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(CirlError::Load("truncated checkpoint header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| CirlError::Load(format!("bad checkpoint header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(CirlError::Load(format!("unknown dtype `{other}`"))),
        };
        let payload = body[len..].to_vec();
        let elements: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != elements * width {
            return Err(CirlError::Load(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                elements * width
            )));
        }
        Ok(Self { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CirlError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CirlError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<ArrayD<F>> {
        self.check_dtype::<F>()?;
        let entry = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CirlError::Load(format!("tensor `{name}` not in checkpoint")))?;
        Ok(self.decode(entry))
    }

    fn check_dtype<F: Real>(&self) -> Result<()> {
        if self.header.dtype != F::DTYPE {
            return Err(CirlError::Load(format!(
                "checkpoint holds {} tensors, expected {}",
                self.header.dtype,
                F::DTYPE
            )));
        }
        Ok(())
    }

    fn decode<F: Real>(&self, entry: &TensorEntry) -> ArrayD<F> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * F::BYTES;
        let data = self.payload[start..start + n * F::BYTES]
            .chunks_exact(F::BYTES)
            .map(F::read_le)
            .collect();
        ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("entry shape matches payload")
    }

    /// Overwrites every visited tensor with the stored one of the same name.
    /// Missing names, shape mismatches and unused stored tensors are errors.
    pub fn load_into<F: Real>(&self, visit_mut: impl FnOnce(&mut TensorVisitorMut<'_, F>)) -> Result<()> {
        self.check_dtype::<F>()?;
        let index: HashMap<&str, &TensorEntry> = self.header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut used = 0;
        let mut problem = None;
        visit_mut(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            match index.get(name.as_str()) {
                None => problem = Some(format!("tensor `{name}` missing from checkpoint")),
                Some(entry) if entry.shape != t.shape() => {
                    problem = Some(format!(
                        "tensor `{name}` has shape {:?} in checkpoint, model expects {:?}",
                        entry.shape,
                        t.shape()
                    ))
                }
                Some(entry) => {
                    *t = self.decode(entry);
                    used += 1;
                }
            }
        });
        if let Some(p) = problem {
            return Err(CirlError::Load(p));
        }
        if used != self.header.tensors.len() {
            return Err(CirlError::Load(format!(
                "checkpoint holds {} tensors, model consumed {used}",
                self.header.tensors.len()
            )));
        }
        Ok(())
    }
}

pub fn save_model<F: Real>(model: &CirlModel<F>, step: u64, metadata: serde_json::Value, path: &Path) -> Result<()> {
    TensorFile::capture(Some(model.spec().clone()), step, |f| model.visit(f))
        .with_metadata(metadata)
        .save(path)
}

/// Rebuilds the model described by the checkpoint header and fills in its
/// tensors. Returns the model and the stored step.
pub fn load_model<F: Real>(path: &Path) -> Result<(CirlModel<F>, TensorFile)> {
    let file = TensorFile::read(path)?;
    let mut spec = file
        .header
        .spec
        .clone()
        .ok_or_else(|| CirlError::Load(format!("{} has no model spec", path.display())))?;
    // Stored tensors replace any pretrained initialization.
    spec.pretrained = false;
    let mut model = CirlModel::build(&spec, 0)?;
    file.load_into(|f| model.visit_mut(f))?;
    Ok((model, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{tensor_digest, Backbone};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = ModelSpec::new(Backbone::ConvnetDigits, 5).with_feature_dim(32);
        let model = CirlModel::<f32>::build(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, 42, serde_json::json!({"epoch": 3}), &path).unwrap();
        let (loaded, file) = load_model::<f32>(&path).unwrap();
        assert_eq!(file.header.step, 42);
        assert_eq!(file.header.metadata["epoch"], 3);
        assert_eq!(tensor_digest(|f| model.visit(f)), tensor_digest(|f| loaded.visit(f)));
        let again = TensorFile::capture(Some(spec), 42, |f| loaded.visit(f))
            .with_metadata(serde_json::json!({"epoch": 3}))
            .to_bytes();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let spec = ModelSpec::new(Backbone::Linear, 3);
        let model = CirlModel::<f64>::build(&spec, 1).unwrap();
        let bytes = TensorFile::capture(Some(spec), 0, |f| model.visit(f)).to_bytes();
        assert!(matches!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]), Err(CirlError::Load(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorFile::from_bytes(&bad).is_err());
        let mut newer = bytes.clone();
        newer[8] = 9;
        assert!(TensorFile::from_bytes(&newer).is_err());
        let file = TensorFile::from_bytes(&bytes).unwrap();
        assert!(file.tensor::<f32>("h1.weight").is_err());
        assert_eq!(file.tensor::<f64>("h1.weight").unwrap().shape(), &[3, 16]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = ModelSpec::new(Backbone::Linear, 3);
        let model = CirlModel::<f64>::build(&spec, 1).unwrap();
        let file = TensorFile::capture(Some(spec.clone()), 0, |f| model.visit(f));
        let mut other = CirlModel::<f64>::build(&spec.with_feature_dim(8), 1).unwrap();
        let err = file.load_into(|f| other.visit_mut(f)).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
