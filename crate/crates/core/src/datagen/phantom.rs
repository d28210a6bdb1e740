//! Synthetic brain-like phantoms. Class identity lives in a central
//! ellipsoidal structure whose radius and brightness fall with the class
//! index; everything else (head shape, texture, nuisance blobs, pose jitter)
//! is class-independent variability. Acquisition shift is applied afterwards
//! in a fixed order: gain, gamma, smoothing, bias field, additive noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{CdaError, Result};
use crate::seed::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub(crate) fn tag(self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Acquisition-shift knobs. `intensity_gain` is a multiplicative factor;
/// the others are deviations from an ideal scanner, with 0 meaning "off".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub intensity_gain: f64,
    /// Exponent offset: intensities map to `v^(1 + intensity_gamma)`.
    pub intensity_gamma: f64,
    pub bias_field_amp: f64,
    pub noise_sigma: f64,
    /// Gaussian blur width in voxels.
    pub smooth_sigma: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            intensity_gain: 1.0,
            intensity_gamma: 0.0,
            bias_field_amp: 0.0,
            noise_sigma: 0.0,
            smooth_sigma: 0.0,
        }
    }

    /// Every knob at zero (including a zero gain).
    pub fn zeros() -> Self {
        ShiftSpec {
            intensity_gain: 0.0,
            ..Self::identity()
        }
    }

    fn validate(&self) -> Result<()> {
        let knobs = [
            ("intensity_gain", self.intensity_gain),
            ("intensity_gamma", self.intensity_gamma),
            ("bias_field_amp", self.bias_field_amp),
            ("noise_sigma", self.noise_sigma),
            ("smooth_sigma", self.smooth_sigma),
        ];
        for (name, v) in knobs {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CdaError::InvalidInput(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub n_per_class: Vec<usize>,
    pub shift: ShiftSpec,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub base_seed: u64,
}

impl DomainSpec {
    /// Source cohort profile: 56 / 110 / 18 subjects, near-ideal acquisition.
    pub fn default_source() -> Self {
        DomainSpec {
            domain: Domain::Source,
            n_per_class: vec![56, 110, 18],
            shift: ShiftSpec {
                noise_sigma: 0.03,
                ..ShiftSpec::identity()
            },
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            base_seed: 0,
        }
    }

    /// Target cohort profile: 34 / 66 / 17 subjects from a shifted scanner.
    pub fn default_target() -> Self {
        DomainSpec {
            domain: Domain::Target,
            n_per_class: vec![34, 66, 17],
            shift: ShiftSpec {
                intensity_gain: 1.3,
                intensity_gamma: 0.4,
                bias_field_amp: 0.25,
                noise_sigma: 0.08,
                smooth_sigma: 0.8,
            },
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            base_seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n_per_class.len()
    }

    pub fn num_samples(&self) -> usize {
        self.n_per_class.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(CdaError::InvalidInput(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.n_per_class.len() < 2 || self.n_per_class.contains(&0) {
            return Err(CdaError::InvalidInput(format!(
                "need >= 2 classes with >= 1 sample each, got {:?}",
                self.n_per_class
            )));
        }
        self.shift.validate()
    }

    pub fn sample_seed(&self, class_id: usize, sample_index: usize) -> u64 {
        seed::derive(&[self.base_seed, self.domain.tag(), class_id as u64, sample_index as u64])
    }
}

/// The two independent random streams behind one phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhantomSeeds {
    pub structure: u64,
    pub acquisition: u64,
}

impl PhantomSeeds {
    pub fn from_sample_seed(sample_seed: u64) -> Self {
        PhantomSeeds {
            structure: seed::derive(&[sample_seed, stream::STRUCTURE]),
            acquisition: seed::derive(&[sample_seed, stream::NOISE]),
        }
    }
}

/// Radius (normalized units) of the class-bearing structure.
pub fn structure_radius(class_id: usize, num_classes: usize) -> f64 {
    let t = class_id as f64 / (num_classes.max(2) - 1) as f64;
    0.42 - 0.20 * t
}

/// Base brightness of the class-bearing structure.
pub fn structure_intensity(class_id: usize, num_classes: usize) -> f64 {
    let t = class_id as f64 / (num_classes.max(2) - 1) as f64;
    1.0 - 0.25 * t
}

fn smoothstep_edge(dist: f64, width: f64) -> f64 {
    // 1 inside, 0 outside, linear ramp of `width` around the unit surface
    ((1.0 - dist) / width + 0.5).clamp(0.0, 1.0)
}

fn jitter(rng: &mut Rng, amount: f64) -> f64 {
    rng.random_range(-amount..=amount)
}

/// Normalized coordinate in [-1, 1] of voxel center `i` along an axis of `n`.
fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

struct Blob {
    center: [f64; 3],
    radius: f64,
    intensity: f64,
}

/// Noise-free anatomy for a class.
fn render_structure(class_id: usize, num_classes: usize, dims: [usize; 3], rng: &mut Rng) -> Vec<f64> {
    let head_r = [0.82 + jitter(rng, 0.04), 0.86 + jitter(rng, 0.04), 0.78 + jitter(rng, 0.04)];
    let head_c = [jitter(rng, 0.04), jitter(rng, 0.04), jitter(rng, 0.04)];
    let r = structure_radius(class_id, num_classes) * (1.0 + jitter(rng, 0.06));
    let core_r = [r * (1.0 + jitter(rng, 0.08)), r * (1.0 + jitter(rng, 0.08)), r * 0.9];
    let core_c = [jitter(rng, 0.06), jitter(rng, 0.06), jitter(rng, 0.06)];
    let core_i = structure_intensity(class_id, num_classes) + jitter(rng, 0.04);
    let tissue = 0.45 + jitter(rng, 0.04);

    // low-frequency texture: a few random plane waves
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let k = [jitter(rng, 3.0), jitter(rng, 3.0), jitter(rng, 3.0)];
            (k, rng.random_range(0.0..std::f64::consts::TAU), 0.03)
        })
        .collect();
    let n_blobs = rng.random_range(2..=4);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            center: [jitter(rng, 0.5), jitter(rng, 0.5), jitter(rng, 0.5)],
            radius: rng.random_range(0.08..0.16),
            intensity: rng.random_range(-0.15..0.25),
        })
        .collect();

    let edge = 2.0 / dims[0].min(dims[1]).min(dims[2]) as f64;
    let mut out = Vec::with_capacity(dims.iter().product());
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let u = [coord(i0, dims[0]), coord(i1, dims[1]), coord(i2, dims[2])];
                let ellipsoid = |c: &[f64; 3], r: &[f64; 3]| {
                    ((0..3).map(|a| ((u[a] - c[a]) / r[a]).powi(2)).sum::<f64>()).sqrt()
                };
                let head = smoothstep_edge(ellipsoid(&head_c, &head_r), edge / head_r[0]);
                if head == 0.0 {
                    out.push(0.0);
                    continue;
                }
                let mut v = tissue;
                for (k, phase, amp) in &waves {
                    v += amp * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2] + phase).sin();
                }
                for b in &blobs {
                    let d = ((0..3).map(|a| (u[a] - b.center[a]).powi(2)).sum::<f64>()).sqrt() / b.radius;
                    v += b.intensity * smoothstep_edge(d, edge / b.radius);
                }
                let core = smoothstep_edge(ellipsoid(&core_c, &core_r), edge / r);
                v = v * (1.0 - core) + core_i * core;
                out.push(head * v.max(0.0));
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|x| (-(x as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let src = data.to_vec();
        let mut line = vec![0.0; n];
        for base in 0..data.len() {
            // visit each line once, from its first voxel
            if (base / stride) % n != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let p = (i as isize + j as isize - half).clamp(0, n as isize - 1) as usize;
                    acc += w * src[base + p * stride];
                }
                *l = acc;
            }
            for (i, l) in line.iter().enumerate() {
                data[base + i * stride] = *l;
            }
        }
    }
}

fn apply_shift(data: &mut [f64], dims: [usize; 3], shift: &ShiftSpec, rng: &mut Rng) {
    for v in data.iter_mut() {
        *v *= shift.intensity_gain;
    }
    if shift.intensity_gamma > 0.0 {
        let e = 1.0 + shift.intensity_gamma;
        for v in data.iter_mut() {
            *v = v.signum() * v.abs().powf(e);
        }
    }
    gaussian_blur(data, dims, shift.smooth_sigma);
    // bias coefficients are always drawn so the noise stream does not depend
    // on whether the bias field is enabled
    let lin = [jitter(rng, 1.0), jitter(rng, 1.0), jitter(rng, 1.0)];
    let quad = jitter(rng, 1.0);
    if shift.bias_field_amp > 0.0 {
        let mut idx = 0;
        for i0 in 0..dims[0] {
            for i1 in 0..dims[1] {
                for i2 in 0..dims[2] {
                    let u = [coord(i0, dims[0]), coord(i1, dims[1]), coord(i2, dims[2])];
                    let field = (lin[0] * u[0] + lin[1] * u[1] + lin[2] * u[2]) / 3.0
                        + quad * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] - 1.0) / 2.0;
                    data[idx] *= (shift.bias_field_amp * field).exp();
                    idx += 1;
                }
            }
        }
    }
    if shift.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, shift.noise_sigma).expect("finite sigma");
        for v in data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// Renders one phantom from explicit structure/acquisition seeds.
pub fn render_phantom(class_id: usize, spec: &DomainSpec, seeds: PhantomSeeds) -> Result<Volume> {
    spec.validate()?;
    let k = spec.num_classes();
    if class_id >= k {
        return Err(CdaError::InvalidInput(format!("class id {class_id} outside [0, {k})")));
    }
    let mut data = render_structure(class_id, k, spec.dims, &mut seed::rng(seeds.structure));
    apply_shift(&mut data, spec.dims, &spec.shift, &mut seed::rng(seeds.acquisition));
    let data: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CdaError::Data("phantom produced non-finite voxels".into()));
    }
    Volume::new(spec.dims, spec.spacing, data)
}

/// Deterministic in `(spec.base_seed, spec.domain, class_id, sample_index)`.
pub fn generate_phantom(class_id: usize, spec: &DomainSpec, sample_index: usize) -> Result<Volume> {
    let seeds = PhantomSeeds::from_sample_seed(spec.sample_seed(class_id, sample_index));
    render_phantom(class_id, spec, seeds)
}

/// Mean intensity over the central cube `|u| < 0.25` on every axis.
pub fn mean_interior_intensity(v: &Volume) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i0 in 0..v.dims[0] {
        for i1 in 0..v.dims[1] {
            for i2 in 0..v.dims[2] {
                let inside = [(i0, 0), (i1, 1), (i2, 2)]
                    .iter()
                    .all(|&(i, a)| coord(i, v.dims[a]).abs() < 0.25);
                if inside {
                    acc += f64::from(v.get(i0, i1, i2));
                    n += 1;
                }
            }
        }
    }
    acc / n.max(1) as f64
}
