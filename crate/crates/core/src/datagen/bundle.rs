//! Dataset bundle: a directory with `manifest.json` and one CSV per
//! snapshot, columns `x1..xd` optionally followed by `v1..vd`.

use std::fs;
use std::path::Path;

use popmech_autodiff::Array;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::SnapshotDataset;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    pub times: Vec<f64>,
    pub paired: bool,
    pub velocities: bool,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
}

/// Writes `ds` under `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, ds: &SnapshotDataset, config_hash: Option<&str>, provenance: Option<Value>) -> Result<Manifest> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = ds.len().max(1).to_string().len().max(3);
    let files: Vec<String> = (0..ds.len()).map(|i| format!("snapshot_{i:0width$}.csv")).collect();
    let d = ds.dim;
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    if ds.velocities.is_some() {
        header.extend((1..=d).map(|k| format!("v{k}")));
    }
    for (i, name) in files.iter().enumerate() {
        let path = dir.join(name);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        let err = |e: csv::Error| Error::data(path.display().to_string(), e.to_string());
        w.write_record(&header).map_err(err)?;
        let x = &ds.snapshots[i];
        let mut rec = Vec::with_capacity(header.len());
        for r in 0..x.rows() {
            rec.clear();
            rec.extend(x.row(r).iter().map(|v| v.to_string()));
            if let Some(vs) = &ds.velocities {
                rec.extend(vs[i].row(r).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dim: d,
        times: ds.times.clone(),
        paired: ds.paired,
        velocities: ds.velocities.is_some(),
        files,
        config_hash: config_hash.map(str::to_owned),
        provenance,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::data("manifest.json", e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ctx = path.display().to_string();
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&ctx, format!("malformed manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::data(&ctx, format!("unsupported format version {}", m.format_version)));
    }
    if m.files.len() != m.times.len() {
        return Err(Error::data(&ctx, format!("{} files for {} times", m.files.len(), m.times.len())));
    }
    if m.times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::data(&ctx, "times must be strictly increasing"));
    }
    if m.dim == 0 {
        return Err(Error::data(&ctx, "dim must be ≥ 1"));
    }
    Ok(m)
}

/// Reads a bundle written by [`save_dataset`] or prepared externally.
pub fn load_dataset(dir: &Path) -> Result<SnapshotDataset> {
    let m = read_manifest(dir)?;
    let d = m.dim;
    let cols = if m.velocities { 2 * d } else { d };
    let mut snaps = Vec::with_capacity(m.files.len());
    let mut vels = Vec::with_capacity(m.files.len());
    for name in &m.files {
        let path = dir.join(name);
        let ctx = path.display().to_string();
        if !path.exists() {
            return Err(Error::data(&ctx, "missing snapshot file"));
        }
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(&path)
            .map_err(|e| Error::data(&ctx, e.to_string()))?;
        let header = r.headers().map_err(|e| Error::data(&ctx, e.to_string()))?.clone();
        if header.len() != cols {
            return Err(Error::data(&ctx, format!("line 1: expected {cols} columns, found {}", header.len())));
        }
        let mut x = Vec::new();
        let mut v = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::data(&ctx, e.to_string()))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != cols {
                return Err(Error::data(&ctx, format!("line {line}: expected {cols} columns, found {}", rec.len())));
            }
            for (k, field) in rec.iter().enumerate() {
                let val: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::data(&ctx, format!("line {line}: cannot parse {field:?} as a number")))?;
                if k < d {
                    x.push(val);
                } else {
                    v.push(val);
                }
            }
        }
        let n = x.len() / d;
        snaps.push(Array::new(vec![n, d], x)?);
        if m.velocities {
            vels.push(Array::new(vec![n, d], v)?);
        }
    }
    let ds = SnapshotDataset {
        dim: d,
        times: m.times,
        snapshots: snaps,
        velocities: m.velocities.then_some(vels),
        paired: m.paired,
    };
    ds.validate()
        .map_err(|e| Error::data(dir.display().to_string(), e.to_string()))?;
    Ok(ds)
}
