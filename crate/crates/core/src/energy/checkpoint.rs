//! Single-file archive: magic, a JSON header, then raw little-endian `f64`
//! buffers in the order the header declares them.
//!
//! ```text
//! b"POPMECH\x01" | u64 LE header length | header JSON | f64 LE data ...
//! ```

use std::fs;
use std::path::Path;

use popmech_autodiff::Array;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Architecture, EnergyParams, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"POPMECH\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BufferSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    buffers: Vec<BufferSpec>,
    meta: Value,
}

/// Writes `buffers` with free-form `meta` to `path`.
pub fn write_archive(path: &Path, meta: Value, buffers: &[(String, &Array)]) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        buffers: buffers
            .iter()
            .map(|(name, a)| BufferSpec {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    let total: usize = buffers.iter().map(|(_, a)| a.len()).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * total);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, a) in buffers {
        for v in a.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<(Value, Vec<(String, Array)>)> {
    let ctx = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::data(ctx, "not a checkpoint archive (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::data(&ctx, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::data(&ctx, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::data(&ctx, format!("unsupported format version {}", header.format_version)));
    }
    let mut pos = 16 + hlen;
    let mut out = Vec::with_capacity(header.buffers.len());
    for spec in header.buffers {
        let n: usize = spec.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| Error::data(&ctx, format!("truncated buffer {}", spec.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * n;
        out.push((spec.name, Array::new(spec.shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::data(&ctx, "trailing bytes after declared buffers"));
    }
    Ok((header.meta, out))
}

/// Saves energy weights alone.
pub fn save_params(path: &Path, params: &EnergyParams) -> Result<()> {
    let meta = serde_json::json!({ "arch": params.arch, "seed": params.seed });
    let bufs: Vec<(String, &Array)> = params.tensors.iter().map(|t| (t.name.clone(), &t.value)).collect();
    write_archive(path, meta, &bufs)
}

pub fn load_params(path: &Path) -> Result<EnergyParams> {
    let (meta, bufs) = read_archive(path)?;
    params_from_parts(&meta, bufs, &path.display().to_string())
}

pub(crate) fn params_from_parts(meta: &Value, bufs: Vec<(String, Array)>, ctx: &str) -> Result<EnergyParams> {
    let arch: Architecture = serde_json::from_value(meta["arch"].clone())
        .map_err(|e| Error::data(ctx, format!("architecture: {e}")))?;
    let seed = meta["seed"].as_u64().unwrap_or(0);
    let params = EnergyParams {
        seed,
        tensors: bufs.into_iter().map(|(name, value)| Tensor { name, value }).collect(),
        arch,
    };
    let expected = super::init_params(&params.arch, 0)?;
    let names_ok = expected.tensors.len() == params.tensors.len()
        && expected
            .tensors
            .iter()
            .zip(&params.tensors)
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !names_ok {
        return Err(Error::data(ctx, "tensor layout does not match the declared architecture"));
    }
    Ok(params)
}
