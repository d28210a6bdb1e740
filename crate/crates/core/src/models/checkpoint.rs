//! Checkpoint directories: one raw little-endian tensor file per named
//! parameter plus `index.json` listing `{name, shape, dtype, sha256}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CdaModel, ModelConfig, ParamGroup};
use crate::error::{CdaError, Result};
use crate::nn::real::Real;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.raw")
}

pub fn save<R: Real>(model: &CdaModel<R>, dir: &Path) -> Result<Vec<TensorEntry>> {
    fs::create_dir_all(dir).map_err(|e| CdaError::io(dir, e))?;
    let mut entries = Vec::new();
    let mut err = None;
    for g in ParamGroup::ALL {
        model.visit_group(g, &mut |name, p| {
            if err.is_some() {
                return;
            }
            let mut bytes = Vec::with_capacity(p.len() * R::BYTES);
            for &v in &p.value {
                v.write_le(&mut bytes);
            }
            let path = dir.join(tensor_file(name));
            if let Err(e) = fs::write(&path, &bytes) {
                err = Some(CdaError::io(path, e));
                return;
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: p.shape.clone(),
                dtype: R::DTYPE.to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    let index = dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&entries).map_err(|e| CdaError::json(&index, e))?;
    fs::write(&index, json).map_err(|e| CdaError::io(&index, e))?;
    Ok(entries)
}

/// Rebuilds a model of the given architecture from a checkpoint directory,
/// verifying every tensor's shape, dtype and digest.
pub fn load<R: Real>(config: &ModelConfig, dir: &Path) -> Result<CdaModel<R>> {
    let index = dir.join(INDEX_FILE);
    let text = fs::read(&index).map_err(|e| CdaError::io(&index, e))?;
    let entries: Vec<TensorEntry> = serde_json::from_slice(&text).map_err(|e| CdaError::json(&index, e))?;
    let mut by_name: BTreeMap<String, TensorEntry> = entries.into_iter().map(|e| (e.name.clone(), e)).collect();

    let mut model = CdaModel::<R>::init(config, 0)?;
    let mut err: Option<CdaError> = None;
    for g in ParamGroup::ALL {
        model.visit_group_mut(g, &mut |name, p| {
            if err.is_some() {
                return;
            }
            let fail = |msg: String| CdaError::Format {
                path: dir.join(tensor_file(name)),
                msg,
            };
            let Some(entry) = by_name.remove(name) else {
                err = Some(fail(format!("tensor {name} missing from index")));
                return;
            };
            if entry.shape != p.shape || entry.dtype != R::DTYPE {
                err = Some(fail(format!(
                    "expected {:?} {}, index has {:?} {}",
                    p.shape,
                    R::DTYPE,
                    entry.shape,
                    entry.dtype
                )));
                return;
            }
            let path = dir.join(tensor_file(name));
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    err = Some(CdaError::io(path, e));
                    return;
                }
            };
            if bytes.len() != p.len() * R::BYTES {
                err = Some(fail(format!(
                    "expected {} bytes, found {}",
                    p.len() * R::BYTES,
                    bytes.len()
                )));
                return;
            }
            if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
                err = Some(fail("sha256 mismatch".into()));
                return;
            }
            for (v, chunk) in p.value.iter_mut().zip(bytes.chunks_exact(R::BYTES)) {
                *v = R::read_le(chunk);
            }
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(CdaError::Format {
            path: index,
            msg: format!("index lists unknown tensor {extra}"),
        });
    }
    Ok(model)
}
