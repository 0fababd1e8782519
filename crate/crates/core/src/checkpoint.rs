//! On-disk array format shared by every checkpoint in the crate.
//!
//! A checkpoint is a directory holding `manifest.json` plus one flat
//! little-endian `f32` file per named array (row-major).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamStore};
use crate::error::{DactError, Result};

pub const FORMAT: &str = "dact-arrays-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    #[serde(default)]
    pub period_index: Option<usize>,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.f32")
}

pub fn encode_f32(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for x in m.iter() {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8], shape: [usize; 2]) -> Result<Mat> {
    let n = shape[0] * shape[1];
    if bytes.len() != n * 4 {
        return Err(DactError::Dimension {
            expected: n * 4,
            got: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked above"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DactError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| DactError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DactError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes named arrays and a manifest into `dir` (created if needed).
pub fn write_arrays(
    dir: &Path,
    kind: &str,
    period_index: Option<usize>,
    meta: serde_json::Value,
    arrays: &[(&str, &Mat)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DactError::io(dir, e))?;
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, m) in arrays {
        let file = file_name(name);
        let path = dir.join(&file);
        fs::write(&path, encode_f32(m)).map_err(|e| DactError::io(&path, e))?;
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: [m.nrows(), m.ncols()],
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        kind: kind.to_string(),
        period_index,
        meta,
        arrays: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_arrays(dir: &Path) -> Result<(Manifest, Vec<(String, Mat)>)> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != FORMAT {
        return Err(DactError::config(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let mut out = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| DactError::io(&path, e))?;
        out.push((entry.name.clone(), decode_f32(&bytes, entry.shape)?));
    }
    Ok((manifest, out))
}

/// Saves every parameter of `store` under its registered name, with an
/// optional prefix (e.g. `cdim.`).
pub fn save_store(
    dir: &Path,
    kind: &str,
    period_index: Option<usize>,
    meta: serde_json::Value,
    stores: &[(&str, &ParamStore)],
) -> Result<()> {
    let names: Vec<(String, &Mat)> = stores
        .iter()
        .flat_map(|(prefix, s)| s.iter().map(move |(_, n, v)| (format!("{prefix}{n}"), v)))
        .collect();
    let refs: Vec<(&str, &Mat)> = names.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    write_arrays(dir, kind, period_index, meta, &refs)
}

/// Overwrites the parameters of `store` with arrays named `prefix + name`.
pub fn load_into_store(arrays: &[(String, Mat)], prefix: &str, store: &mut ParamStore) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let want = format!("{prefix}{}", store.name(id));
        let (_, m) = arrays
            .iter()
            .find(|(n, _)| *n == want)
            .ok_or_else(|| DactError::Missing(format!("array `{want}` in checkpoint")))?;
        let target = store.get_mut(id);
        if target.dim() != m.dim() {
            return Err(DactError::Dimension {
                expected: target.len(),
                got: m.len(),
            });
        }
        target.assign(m);
    }
    Ok(())
}
