//! Weak and strong geometric augmentation of volumes.
//!
//! A sampled [`AugmentPlan`] maps every output voxel to a continuous source
//! coordinate: optional per-axis flip, then a centered affine map (rotation,
//! per-axis scale, translation), then an elastic displacement interpolated
//! from a coarse control grid. Intensities are resampled trilinearly with
//! zero fill outside the input grid.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::Volume;
use crate::error::{CdaError, Result};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineRange {
    pub max_rotation_deg: f64,
    pub max_scale_delta: f64,
    pub max_translation_vox: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticRange {
    /// Control points per axis.
    pub control_grid: usize,
    pub max_displacement_vox: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub flip_prob: f64,
    pub affine: AffineRange,
    pub elastic: Option<ElasticRange>,
}

impl AugmentPolicy {
    /// Random flips and a mild affine jitter.
    pub fn weak() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Weak,
            flip_prob: 0.5,
            affine: AffineRange {
                max_rotation_deg: 5.0,
                max_scale_delta: 0.05,
                max_translation_vox: 2.0,
            },
            elastic: None,
        }
    }

    /// Large affine jitter plus elastic deformation.
    pub fn strong() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Strong,
            flip_prob: 0.5,
            affine: AffineRange {
                max_rotation_deg: 20.0,
                max_scale_delta: 0.15,
                max_translation_vox: 4.0,
            },
            elastic: Some(ElasticRange {
                control_grid: 4,
                max_displacement_vox: 3.0,
            }),
        }
    }

    /// Leaves every volume untouched whatever the seed.
    pub fn identity(kind: AugmentKind) -> Self {
        AugmentPolicy {
            kind,
            flip_prob: 0.0,
            affine: AffineRange {
                max_rotation_deg: 0.0,
                max_scale_delta: 0.0,
                max_translation_vox: 0.0,
            },
            elastic: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CdaError::InvalidInput(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        let a = &self.affine;
        for (name, v) in [
            ("max_rotation_deg", a.max_rotation_deg),
            ("max_scale_delta", a.max_scale_delta),
            ("max_translation_vox", a.max_translation_vox),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CdaError::InvalidInput(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if a.max_scale_delta >= 1.0 {
            return Err(CdaError::InvalidInput("max_scale_delta must be < 1".into()));
        }
        match (&self.elastic, self.kind) {
            (Some(_), AugmentKind::Weak) => {
                Err(CdaError::InvalidInput("weak policies cannot enable elastic deformation".into()))
            }
            (Some(e), _) if e.control_grid < 2 || !(e.max_displacement_vox.is_finite() && e.max_displacement_vox >= 0.0) => {
                Err(CdaError::InvalidInput(format!("bad elastic settings {e:?}")))
            }
            _ => Ok(()),
        }
    }
}

/// One concrete draw of an augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    dims: [usize; 3],
    flips: [bool; 3],
    matrix: [[f64; 3]; 3],
    translation: [f64; 3],
    /// `control_grid^3` displacement vectors, `[g0][g1][g2]` order.
    elastic: Option<(usize, Vec<[f64; 3]>)>,
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

impl AugmentPlan {
    pub fn sample(policy: &AugmentPolicy, dims: [usize; 3], seed: u64) -> Result<Self> {
        policy.validate()?;
        let mut rng = seed::rng_for(&[seed, stream::AUGMENT]);
        // symmetric draw in [-max, max]
        let mut sym = |max: f64| max * (2.0 * rng.random::<f64>() - 1.0);
        let flip_draws = [sym(1.0), sym(1.0), sym(1.0)];
        let flips = flip_draws.map(|u| (u + 1.0) / 2.0 < policy.flip_prob);
        let rad = policy.affine.max_rotation_deg.to_radians();
        let angles = [sym(rad), sym(rad), sym(rad)];
        let ds = policy.affine.max_scale_delta;
        let scales = [1.0 + sym(ds), 1.0 + sym(ds), 1.0 + sym(ds)];
        let dt = policy.affine.max_translation_vox;
        let translation = [sym(dt), sym(dt), sym(dt)];
        let mut matrix = rotation(angles);
        for row in matrix.iter_mut() {
            for (v, s) in row.iter_mut().zip(scales) {
                *v *= s;
            }
        }
        let elastic = policy.elastic.as_ref().map(|e| {
            let n = e.control_grid.pow(3);
            let m = e.max_displacement_vox;
            (e.control_grid, (0..n).map(|_| [sym(m), sym(m), sym(m)]).collect())
        });
        Ok(AugmentPlan {
            dims,
            flips,
            matrix,
            translation,
            elastic,
        })
    }

    fn displacement(&self, o: [f64; 3]) -> [f64; 3] {
        let Some((g, ctrl)) = &self.elastic else {
            return [0.0; 3];
        };
        let g = *g;
        let gc: [f64; 3] = std::array::from_fn(|a| {
            let span = (self.dims[a] as f64 - 1.0).max(1.0);
            (o[a] / span * (g - 1) as f64).clamp(0.0, (g - 1) as f64)
        });
        let base: [usize; 3] = std::array::from_fn(|a| (gc[a].floor() as usize).min(g - 2));
        let frac: [f64; 3] = std::array::from_fn(|a| gc[a] - base[a] as f64);
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let w: f64 = (0..3)
                .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            let idx = ((base[0] + off[0]) * g + base[1] + off[1]) * g + base[2] + off[2];
            for a in 0..3 {
                out[a] += w * ctrl[idx][a];
            }
        }
        out
    }

    /// Continuous source coordinate sampled for output voxel `o`.
    pub fn source_coord(&self, o: [usize; 3]) -> [f64; 3] {
        let o: [f64; 3] = std::array::from_fn(|a| {
            if self.flips[a] {
                (self.dims[a] - 1 - o[a]) as f64
            } else {
                o[a] as f64
            }
        });
        let center: [f64; 3] = std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0);
        let rel: [f64; 3] = std::array::from_fn(|a| o[a] - center[a]);
        let disp = self.displacement(o);
        std::array::from_fn(|a| {
            let m = &self.matrix[a];
            m[0] * rel[0] + m[1] * rel[1] + m[2] * rel[2] + center[a] + self.translation[a] + disp[a]
        })
    }

    /// True when every trilinear neighbour with non-zero weight is inside the grid.
    pub fn in_domain(&self, o: [usize; 3]) -> bool {
        let s = self.source_coord(o);
        (0..3).all(|a| s[a] >= 0.0 && s[a] <= (self.dims[a] - 1) as f64)
    }

    pub fn apply(&self, volume: &Volume) -> Result<Volume> {
        if volume.dims != self.dims {
            return Err(CdaError::InvalidInput(format!(
                "plan sampled for {:?}, volume is {:?}",
                self.dims, volume.dims
            )));
        }
        let mut out = Volume::zeros(volume.dims, volume.spacing);
        let mut idx = 0;
        for i0 in 0..self.dims[0] {
            for i1 in 0..self.dims[1] {
                for i2 in 0..self.dims[2] {
                    out.data[idx] = trilinear(volume, self.source_coord([i0, i1, i2]));
                    idx += 1;
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // exact at t = 0 and when a == b
    a + (b - a) * t
}

fn trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let fl = p.map(f64::floor);
    let t: [f64; 3] = std::array::from_fn(|a| p[a] - fl[a]);
    let at = |a: isize, b: isize, c: isize| -> f64 {
        let inside = a >= 0
            && b >= 0
            && c >= 0
            && (a as usize) < v.dims[0]
            && (b as usize) < v.dims[1]
            && (c as usize) < v.dims[2];
        if inside {
            f64::from(v.get(a as usize, b as usize, c as usize))
        } else {
            0.0
        }
    };
    let (x, y, z) = (fl[0] as isize, fl[1] as isize, fl[2] as isize);
    let c00 = lerp(at(x, y, z), at(x, y, z + 1), t[2]);
    let c01 = lerp(at(x, y + 1, z), at(x, y + 1, z + 1), t[2]);
    let c10 = lerp(at(x + 1, y, z), at(x + 1, y, z + 1), t[2]);
    let c11 = lerp(at(x + 1, y + 1, z), at(x + 1, y + 1, z + 1), t[2]);
    lerp(lerp(c00, c01, t[1]), lerp(c10, c11, t[1]), t[0]) as f32
}

pub fn augment(volume: &Volume, policy: &AugmentPolicy, seed: u64) -> Result<Volume> {
    AugmentPlan::sample(policy, volume.dims, seed)?.apply(volume)
}

pub fn weak_augment(volume: &Volume, seed: u64) -> Result<Volume> {
    augment(volume, &AugmentPolicy::weak(), seed)
}

pub fn strong_augment(volume: &Volume, seed: u64) -> Result<Volume> {
    augment(volume, &AugmentPolicy::strong(), seed)
}
