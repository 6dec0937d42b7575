use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::ndtensor::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"PHCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
    /// Element type of the data section.
    #[serde(default)]
    pub dtype: Precision,
    /// Free-form state stored alongside the weights (training progress).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named arrays plus a JSON header.
///
/// On disk: 8-byte magic, little-endian `u64` header length, the JSON header,
/// then every array as little-endian `dtype` values in manifest order. Values
/// are held as `f64` in memory, which is exact for both dtypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dtype: Precision,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            dtype: T::PRECISION,
            tensors: model
                .layout()
                .names
                .iter()
                .cloned()
                .zip(model.params().iter().map(Tensor::cast))
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    /// Rebuilds the model from the leading parameter arrays.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let names = super::model::Layout::new(&self.config).names;
        let mut params = Vec::with_capacity(names.len());
        for name in &names {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            params.push(t.cast());
        }
        Model::from_parts(self.config.clone(), params)
    }

    /// Appends extra named state (optimizer moments) to be saved alongside.
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            manifest,
            dtype: self.dtype,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let width = elem_width(self.dtype);
        let mut out = Vec::with_capacity(16 + json.len() + width * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                match self.dtype {
                    Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let data = &bytes[16 + hlen..];
        let width = elem_width(header.dtype);
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(width * e.offset..width * (e.offset + n))
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
            let vals = raw
                .chunks_exact(width)
                .map(|c| match header.dtype {
                    Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), vals)?));
        }
        Ok(Checkpoint {
            config: header.config,
            dtype: header.dtype,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn elem_width(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}
