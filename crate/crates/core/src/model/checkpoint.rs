//! Binary tensor container.
//!
//! Layout: the 8-byte magic `OKDLAB01`, a little-endian `u64` header length,
//! a JSON header `{kind, tensors: [{name, shape, dtype}], meta}`, then the raw
//! little-endian tensor data in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::transformer::TransformerLm;
use crate::error::{Error, Result};
use crate::numcore::{DType, Real, Tensor};

const MAGIC: &[u8; 8] = b"OKDLAB01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_container<T: Real>(
    path: &Path,
    kind: &str,
    tensors: &[(String, &Tensor<T>)],
    meta: serde_json::Value,
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        write(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a container, converting stored values to `T`.
#[allow(clippy::type_complexity)]
pub fn read_container<T: Real>(path: &Path) -> Result<(String, Vec<(String, Tensor<T>)>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "missing OKDLAB01 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let mut offset = 16 + hlen;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let width = entry.dtype.size_of();
        let raw = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| corrupt(path, format!("truncated data for {}", entry.name)))?;
        offset += n * width;
        let values: Vec<f64> = match entry.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c).to_f64()).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        let t = Tensor::from_f64(entry.shape, &values).map_err(|e| corrupt(path, format!("{}: {e}", entry.name)))?;
        out.push((entry.name, t));
    }
    if offset != bytes.len() {
        return Err(corrupt(path, "trailing bytes after tensor data"));
    }
    Ok((header.kind, out, header.meta))
}

/// Path of the JSON config written next to a model checkpoint.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

impl<T: Real> TransformerLm<T> {
    /// Writes the weights and a `<path>.config.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor<T>)> = self.params().iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = serde_json::to_value(self.config())?;
        write_container(path, "model", &named, meta)?;
        let side = config_sidecar(path);
        fs::write(&side, serde_json::to_string_pretty(self.config())?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, tensors, meta) = read_container::<T>(path)?;
        if kind != "model" {
            return Err(corrupt(path, format!("expected a model container, found {kind}")));
        }
        let side = config_sidecar(path);
        let config: ModelConfig = if side.exists() {
            let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            serde_json::from_str(&text)?
        } else {
            serde_json::from_value(meta)?
        };
        Self::from_params(config, tensors).map_err(|e| corrupt(path, e.to_string()))
    }
}
