//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "LCTNSR\0\0"
//! version    u32
//! manifest   u64 length, then UTF-8 JSON
//! payload    raw little-endian tensor data, offsets relative to its start
//! ```
//!
//! The manifest carries free-form metadata plus one record per tensor
//! (name, shape, dtype, byte offset, byte length, trainable).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LCTNSR\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub len: u64,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    metadata: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Accumulates tensors and metadata, then writes them in one shot.
#[derive(Debug, Default)]
pub struct ContainerWriter {
    metadata: serde_json::Value,
    records: Vec<TensorRecord>,
    payload: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            records: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn add<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>, trainable: bool) {
        let offset = self.payload.len() as u64;
        for &v in tensor.data() {
            v.write_le(&mut self.payload);
        }
        self.records.push(TensorRecord {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            len: self.payload.len() as u64 - offset,
            trainable,
        });
    }

    pub fn add_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, e) in store.iter() {
            self.add(format!("{prefix}{}", e.name), &e.tensor, e.trainable);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&Manifest {
            metadata: self.metadata.clone(),
            tensors: self.records.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + manifest.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Writes to a sibling temp file and renames it over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Replaces `path` with `bytes` via a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| TensorError::Checkpoint(format!("{} has no file name", path.display())))?;
    let tmp_name = format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A loaded container.
#[derive(Debug, Clone)]
pub struct Container {
    metadata: serde_json::Value,
    records: Vec<TensorRecord>,
    payload: Vec<u8>,
}

impl Container {
    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let mend = 20usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..mend])?;
        let payload = bytes[mend..].to_vec();
        for r in &manifest.tensors {
            let numel: usize = r.shape.iter().product();
            let expect = (numel * r.dtype.size_of()) as u64;
            if r.len != expect || r.offset + r.len > payload.len() as u64 {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{}` payload out of bounds or mis-sized",
                    r.name
                )));
            }
        }
        Ok(Self {
            metadata: manifest.metadata,
            records: manifest.tensors,
            payload,
        })
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.metadata
    }

    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.name == name)
    }

    /// Reads a tensor, converting precision if the stored dtype differs.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self
            .records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| TensorError::Checkpoint(format!("no tensor `{name}`")))?;
        let bytes = &self.payload[r.offset as usize..(r.offset + r.len) as usize];
        let data: Vec<T> = match r.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Tensor::new(r.shape.clone(), data)
    }

    /// Fills every tensor of `store` from `prefix + name`, checking shapes.
    pub fn load_into<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let t: Tensor<T> = self.tensor(&key)?;
            if t.shape() != store.get(id).shape() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t;
        }
        Ok(())
    }
}
