//! Two-domain synthetic volumetric benchmark: phantom generation, the raw
//! volume format, and the dataset manifest.

mod phantom;
mod volume;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};

pub use phantom::{
    generate_phantom, mean_interior_intensity, render_phantom, structure_intensity, structure_radius, Domain,
    DomainSpec, PhantomSeeds, ShiftSpec,
};
pub use volume::{load_volume, save_volume, Volume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOLUME_EXT: &str = "f32raw";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub domain: Domain,
    /// Always present for source samples; for target samples it is the
    /// held-back ground truth used only for evaluation.
    pub label: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn count(&self, domain: Domain) -> usize {
        self.samples.iter().filter(|s| s.domain == domain).count()
    }

    pub fn domain(&self, domain: Domain) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.domain == domain)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| CdaError::Format {
            path: PathBuf::from(MANIFEST_FILE),
            msg,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", self.format_version)));
        }
        if self.dims.contains(&0) {
            return Err(bad(format!("dims must be positive, got {:?}", self.dims)));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(&s.id) {
                return Err(bad(format!("duplicate sample id {}", s.id)));
            }
            match s.label {
                None if s.domain == Domain::Source => {
                    return Err(bad(format!("source sample {} has no label", s.id)));
                }
                Some(l) if l >= self.num_classes => {
                    return Err(bad(format!("sample {} label {l} >= num_classes {}", s.id, self.num_classes)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| CdaError::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&text).map_err(|e| CdaError::json(&path, e))?;
        m.validate().map_err(|e| match e {
            CdaError::Format { msg, .. } => CdaError::Format { path: path.clone(), msg },
            other => other,
        })?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_vec_pretty(self).map_err(|e| CdaError::json(&path, e))?;
        text.push(b'\n');
        fs::write(&path, text).map_err(|e| CdaError::io(&path, e))
    }
}

/// Writes every sample of both domains under `out_dir` plus `manifest.json`.
pub fn generate_dataset(source: &DomainSpec, target: &DomainSpec, out_dir: &Path) -> Result<DatasetManifest> {
    source.validate()?;
    target.validate()?;
    if source.domain != Domain::Source || target.domain != Domain::Target {
        return Err(CdaError::InvalidInput("domain specs must be tagged source and target".into()));
    }
    if source.dims != target.dims || source.spacing != target.spacing {
        return Err(CdaError::InvalidInput("source and target must share dims and spacing".into()));
    }
    if source.num_classes() != target.num_classes() {
        return Err(CdaError::InvalidInput("source and target must have the same class count".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CdaError::io(out_dir, e))?;

    let mut jobs = Vec::new();
    for spec in [source, target] {
        for (class_id, &n) in spec.n_per_class.iter().enumerate() {
            for i in 0..n {
                let id = format!("{}_c{class_id}_{i:04}", spec.domain.as_str());
                let path = format!("{}/{id}.{VOLUME_EXT}", spec.domain.as_str());
                let sample = Sample {
                    id,
                    path,
                    domain: spec.domain,
                    label: Some(class_id),
                    seed: spec.sample_seed(class_id, i),
                };
                jobs.push((spec, class_id, i, sample));
            }
        }
    }
    jobs.par_iter().try_for_each(|(spec, class_id, i, sample)| {
        let v = generate_phantom(*class_id, spec, *i)?;
        save_volume(&v, &out_dir.join(&sample.path))
    })?;

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        dims: source.dims,
        spacing: source.spacing,
        num_classes: source.num_classes(),
        samples: jobs.into_iter().map(|(_, _, _, s)| s).collect(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub domain: Domain,
    pub label: Option<usize>,
    pub volume: Volume,
}

/// A manifest with all of its volumes in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let samples = manifest
            .samples
            .par_iter()
            .map(|s| {
                let volume = load_volume(&dir.join(&s.path), manifest.dims, manifest.spacing)?;
                Ok(LoadedSample {
                    id: s.id.clone(),
                    domain: s.domain,
                    label: s.label,
                    volume,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, samples })
    }

    /// Generates directly in memory without touching the filesystem.
    pub fn synthesize(source: &DomainSpec, target: &DomainSpec) -> Result<Self> {
        let dir_free = |spec: &DomainSpec| -> Result<Vec<(Sample, Volume)>> {
            let mut out = Vec::new();
            for (c, &n) in spec.n_per_class.iter().enumerate() {
                for i in 0..n {
                    let id = format!("{}_c{c}_{i:04}", spec.domain.as_str());
                    let sample = Sample {
                        path: format!("{}/{id}.{VOLUME_EXT}", spec.domain.as_str()),
                        id,
                        domain: spec.domain,
                        label: Some(c),
                        seed: spec.sample_seed(c, i),
                    };
                    out.push((sample, generate_phantom(c, spec, i)?));
                }
            }
            Ok(out)
        };
        let mut all = dir_free(source)?;
        all.extend(dir_free(target)?);
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            dims: source.dims,
            spacing: source.spacing,
            num_classes: source.num_classes(),
            samples: all.iter().map(|(s, _)| s.clone()).collect(),
        };
        let samples = all
            .into_iter()
            .map(|(s, volume)| LoadedSample {
                id: s.id,
                domain: s.domain,
                label: s.label,
                volume,
            })
            .collect();
        Ok(Dataset { manifest, samples })
    }

    pub fn indices(&self, domain: Domain) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].domain == domain).collect()
    }
}
