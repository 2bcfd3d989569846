//! `STCK1` checkpoint files.
//!
//! Layout: the 5-byte magic `STCK1`, a little-endian `u32` manifest length,
//! a JSON manifest, then the raw little-endian tensor buffers. Manifest
//! offsets are relative to the first byte after the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"STCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Free-form grouping, e.g. `param` or `buffer`.
    pub group: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Tensors loaded from a checkpoint, converted to `S`.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn group(&self, group: &str) -> Result<ParamStore<S>> {
        let mut store = ParamStore::new();
        for (name, g, t) in &self.tensors {
            if g == group {
                store.insert(name.clone(), t.clone())?;
            }
        }
        Ok(store)
    }
}

/// Serializes grouped tensors with metadata.
pub fn encode<'a, S: Scalar + 'a>(
    metadata: serde_json::Map<String, serde_json::Value>,
    tensors: impl IntoIterator<Item = (&'a str, &'a str, &'a Tensor<S>)>,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (group, name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            group: group.to_string(),
            dtype: S::DTYPE,
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        S::write_le(t.data(), &mut data);
    }
    let manifest = serde_json::to_vec(&Manifest { metadata, tensors: entries }).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let len = u32::try_from(manifest.len()).map_err(|_| Error::Checkpoint("manifest larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing STCK1 header"));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = bytes.get(9..9 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let data = &bytes[9 + len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let nbytes = numel(&e.shape) * e.dtype.size();
        let raw = data
            .get(e.offset..e.offset + nbytes)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)))?;
        let t: Tensor<S> = match e.dtype {
            DType::F32 => Tensor::new(e.shape, f32::read_le(raw))?.cast(),
            DType::F64 => Tensor::new(e.shape, f64::read_le(raw))?.cast(),
        };
        tensors.push((e.name, e.group, t));
    }
    Ok(Checkpoint {
        metadata: manifest.metadata,
        tensors,
    })
}

pub fn save<'a, S: Scalar + 'a>(
    path: &Path,
    metadata: serde_json::Map<String, serde_json::Value>,
    tensors: impl IntoIterator<Item = (&'a str, &'a str, &'a Tensor<S>)>,
) -> Result<()> {
    fs::write(path, encode(metadata, tensors)?)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    decode(&fs::read(path)?)
}

impl<S: Scalar> Network<S> {
    /// Writes parameters, running statistics and the architecture (as TOML
    /// under the `arch` metadata key).
    pub fn save(&self, path: &Path, extra: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        let mut meta = extra;
        meta.insert("arch".into(), self.spec().to_toml()?.into());
        let params = self.params().iter().map(|(n, t)| ("param", n, t));
        let buffers = self.buffers().iter().map(|(n, t)| ("buffer", n, t));
        save(path, meta, params.chain(buffers))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(load(path)?)
    }

    pub fn from_checkpoint(ck: Checkpoint<S>) -> Result<Self> {
        let arch = ck
            .metadata
            .get("arch")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("no `arch` entry in metadata".into()))?;
        let spec = ArchSpec::from_toml(arch)?;
        Self::from_parts(spec, ck.group("param")?, ck.group("buffer")?)
    }
}
