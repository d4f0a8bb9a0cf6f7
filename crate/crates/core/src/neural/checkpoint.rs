//! Checkpoint directories: `manifest.json` names every array with its shape
//! and offset, `params.bin` holds the concatenated little-endian `f64` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamRole, ParamStore};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "tpp-outlier-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the data file in `f64` units.
    pub offset: usize,
    pub role: ParamRole,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    pub total: usize,
}

pub fn save(dir: &Path, kind: &str, config: serde_json::Value, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::with_capacity(store.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for e in store.entries() {
        arrays.push(ArrayEntry {
            name: e.name.clone(),
            rows: e.value.rows(),
            cols: e.value.cols(),
            offset,
            role: e.role,
            frozen: e.frozen,
        });
        for v in e.value.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += e.value.len();
    }
    let manifest = Manifest { format: FORMAT_NAME.into(), version: FORMAT_VERSION, kind: kind.into(), config, arrays, total: offset };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let dpath = dir.join(DATA_FILE);
    fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if m.format != FORMAT_NAME {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint (format {:?})", mpath.display(), m.format)));
    }
    if m.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("{}: version {} is not supported (expected {FORMAT_VERSION})", mpath.display(), m.version)));
    }
    Ok(m)
}

/// Copies the arrays of a checkpoint into a store built with the same
/// architecture. Every store entry must appear exactly once with the same shape.
pub fn load_into(dir: &Path, manifest: &Manifest, store: &mut ParamStore) -> Result<()> {
    let dpath = dir.join(DATA_FILE);
    let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    if bytes.len() != manifest.total * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} bytes, found {} (truncated or corrupt)",
            dpath.display(),
            manifest.total * 8,
            bytes.len()
        )));
    }
    if manifest.arrays.len() != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} arrays, model expects {}", manifest.arrays.len(), store.len())));
    }
    for a in &manifest.arrays {
        let id = store.find(&a.name).ok_or_else(|| Error::Checkpoint(format!("unexpected array {}", a.name)))?;
        let shape = store.value(id).shape();
        if shape != (a.rows, a.cols) {
            return Err(Error::Checkpoint(format!("array {} has shape {}x{}, model expects {shape:?}", a.name, a.rows, a.cols)));
        }
        let end = a.offset + a.rows * a.cols;
        if end > manifest.total {
            return Err(Error::Checkpoint(format!("array {} runs past the data file", a.name)));
        }
        let dst = store.value_mut(id).as_mut_slice();
        for (k, v) in dst.iter_mut().enumerate() {
            let at = (a.offset + k) * 8;
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        }
        store.set_frozen(id, a.frozen);
    }
    Ok(())
}
