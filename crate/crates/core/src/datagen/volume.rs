use std::fs;
use std::path::Path;

use crate::error::{CdaError, Result};

/// Dense 3D scalar grid, index order `[i0][i1][i2]` with `i2` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(CdaError::InvalidInput(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CdaError::InvalidInput(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(CdaError::InvalidInput(format!(
                "{dims:?} volume needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i0: usize, i1: usize, i2: usize) -> usize {
        (i0 * self.dims[1] + i1) * self.dims[2] + i2
    }

    #[inline]
    pub fn get(&self, i0: usize, i1: usize, i2: usize) -> f32 {
        self.data[self.index(i0, i1, i2)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

/// Writes headerless little-endian f32 voxels. Non-finite volumes are refused.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    if let Some(pos) = volume.data.iter().position(|v| !v.is_finite()) {
        return Err(CdaError::Data(format!(
            "refusing to save {}: voxel {pos} is {}",
            path.display(),
            volume.data[pos]
        )));
    }
    let mut bytes = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CdaError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CdaError::io(path, e))
}

pub fn load_volume(path: &Path, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| CdaError::io(path, e))?;
    let expected = 4 * dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(CdaError::Format {
            path: path.to_path_buf(),
            msg: format!("expected {expected} bytes for {dims:?} f32 voxels, found {}", bytes.len()),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(CdaError::Data(format!(
            "{}: voxel {pos} is {}",
            path.display(),
            data[pos]
        )));
    }
    Volume::new(dims, spacing, data)
}
