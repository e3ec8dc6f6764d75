//! On-disk model format: `manifest.json` plus a little-endian f32 blob
//! `params.bin`. See `docs/checkpoint.md` for the byte layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Param, ParamStore};
use crate::error::{Error, Result};

pub const FORMAT: &str = "fastbvp-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, config: &serde_json::Value, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape.clone(),
            offset: blob.len(),
            len: p.numel(),
            trainable: p.trainable,
        });
        for v in &p.data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        tensors,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        if t.shape.iter().product::<usize>() != t.len {
            return Err(Error::Schema(format!(
                "tensor {} shape {:?} disagrees with length {}",
                t.name, t.shape, t.len
            )));
        }
        let end = t.offset + 4 * t.len;
        let bytes = blob.get(t.offset..end).ok_or_else(|| {
            Error::Schema(format!("tensor {} runs past the end of {BLOB_FILE}", t.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(
            t.name.clone(),
            Param {
                shape: t.shape.clone(),
                data,
                trainable: t.trainable,
            },
        );
    }
    Ok((manifest.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("a.weight", Param { shape: vec![2, 3], data: vec![0.1, -2.5, 3.0, 1e-8, 7.25, -0.0], trainable: true });
        p.insert("b.running_var", Param::filled(&[4], 1.5, false));
        let cfg = serde_json::json!({"width": 3});
        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let (c2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2.len(), 2);
        for (name, q) in p.iter() {
            let r = p2.get(name).unwrap();
            assert_eq!(q.shape, r.shape);
            assert_eq!(q.trainable, r.trainable);
            for (a, b) in q.data.iter().zip(&r.data) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        // 6 + 4 floats
        assert_eq!(fs::metadata(dir.path().join(BLOB_FILE)).unwrap().len(), 40);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("w", Param::filled(&[8], 1.0, true));
        save_checkpoint(dir.path(), &serde_json::Value::Null, &p).unwrap();
        fs::write(dir.path().join(BLOB_FILE), [0u8; 12]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Schema(_))));
    }
}
