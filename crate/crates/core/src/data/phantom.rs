//! Synthetic head phantoms: a noisy ellipsoid of soft tissue, optionally
//! carrying a high-density blob that grows between the two scans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::patch::unravel;
use crate::tensor::{numel, Tensor};

use super::VolumePair;

pub const NON_HEMORRHAGIC: usize = 0;
pub const HEMORRHAGIC: usize = 1;

/// Intensity above which a voxel counts as high density.
pub const HIGH_DENSITY: f32 = 0.55;

/// Minimum growth in high-density voxels that marks a hemorrhagic pair.
pub const GROWTH_THRESHOLD: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec<f64>,
    /// Radius in the initial scan, in voxels.
    pub radius: f64,
    pub intensity: f64,
    /// Radius multiplier applied in the follow-up scan.
    pub growth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub extents: Vec<usize>,
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub tissue: f64,
    /// Standard deviation of the additive noise; samples are truncated at ±2σ.
    pub noise_std: f64,
    pub blob: Option<Blob>,
    pub label: usize,
}

impl PhantomSpec {
    /// Draws a random phantom. Hemorrhagic phantoms get a blob with radius
    /// uniform in [2, 6] and growth uniform in [1.5, 2]; draws whose grown
    /// blob leaves the tissue are rejected and redrawn.
    pub fn random(extents: &[usize], label: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if label > HEMORRHAGIC {
            return Err(Error::invalid(format!("label {label} is not 0 or 1")));
        }
        let center: Vec<f64> = extents.iter().map(|&e| (e as f64 - 1.0) / 2.0 + rng.random_range(-1.5..1.5)).collect();
        let radii: Vec<f64> = extents.iter().map(|&e| e as f64 * rng.random_range(0.32..0.42)).collect();
        let mut spec =
            PhantomSpec { extents: extents.to_vec(), center, radii, tissue: 0.3, noise_std: 0.02, blob: None, label };
        if label == HEMORRHAGIC {
            for _ in 0..10_000 {
                let blob = Blob {
                    center: spec.center.iter().zip(&spec.radii).map(|(c, r)| c + rng.random_range(-r..*r)).collect(),
                    radius: rng.random_range(2.0..6.0),
                    intensity: 0.8,
                    growth: rng.random_range(1.5..2.0),
                };
                spec.blob = Some(blob);
                if spec.validate().is_ok() {
                    return Ok(spec);
                }
            }
            return Err(Error::Config(format!("no hemorrhage blob fits inside a phantom of extents {extents:?}")));
        }
        spec.validate()?;
        Ok(spec)
    }

    fn inside_tissue(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.center).zip(&self.radii).map(|((x, c), r)| ((x - c) / r).powi(2)).sum::<f64>() <= 1.0
    }

    fn blob_radius(&self, followup: bool) -> Option<(&Blob, f64)> {
        self.blob.as_ref().map(|b| (b, if followup { b.radius * b.growth } else { b.radius }))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.extents.len();
        if d == 0 || self.extents.contains(&0) || self.center.len() != d || self.radii.len() != d {
            return Err(Error::Config(format!("inconsistent phantom geometry for extents {:?}", self.extents)));
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(format!("phantom radii {:?} must be positive", self.radii)));
        }
        match (&self.blob, self.label) {
            (Some(b), HEMORRHAGIC) if b.growth > 1.0 => {}
            (None, NON_HEMORRHAGIC) => {}
            (Some(b), NON_HEMORRHAGIC) if b.growth == 1.0 => {}
            _ => return Err(Error::Config(format!("blob/growth inconsistent with label {}", self.label))),
        }
        if let Some((b, r)) = self.blob_radius(true) {
            if b.center.len() != d || !(b.radius > 0.0) {
                return Err(Error::Config("malformed blob".into()));
            }
            // every voxel of the grown blob, plus its extreme points, lies in tissue
            let mut x = vec![0.0; d];
            for ax in 0..d {
                for s in [-1.0, 1.0] {
                    x.copy_from_slice(&b.center);
                    x[ax] += s * r;
                    if !self.inside_tissue(&x) {
                        return Err(Error::Config(format!(
                            "hemorrhage blob at {:?} (radius {r}) leaves the tissue",
                            b.center
                        )));
                    }
                }
            }
            let mut outside = false;
            self.for_each_blob_voxel(b, r, |x| outside |= !self.inside_tissue(x));
            if outside {
                return Err(Error::Config(format!("hemorrhage blob at {:?} (radius {r}) leaves the tissue", b.center)));
            }
        }
        Ok(())
    }

    fn for_each_blob_voxel(&self, b: &Blob, r: f64, mut f: impl FnMut(&[f64])) {
        let d = self.extents.len();
        let lo: Vec<i64> = b.center.iter().map(|c| (c - r).floor() as i64).collect();
        let hi: Vec<i64> = b.center.iter().map(|c| (c + r).ceil() as i64).collect();
        let box_ext: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| (h - l + 1) as usize).collect();
        let mut idx = vec![0; d];
        let mut x = vec![0.0; d];
        for i in 0..numel(&box_ext) {
            unravel(i, &box_ext, &mut idx);
            for ax in 0..d {
                x[ax] = (lo[ax] + idx[ax] as i64) as f64;
            }
            let dist2: f64 = x.iter().zip(&b.center).map(|(x, c)| (x - c).powi(2)).sum();
            if dist2 <= r * r {
                f(&x);
            }
        }
    }

    /// Voxels covered by the blob in the initial or follow-up scan.
    pub fn blob_mask(&self, followup: bool) -> Vec<bool> {
        let d = self.extents.len();
        let mut idx = vec![0; d];
        (0..numel(&self.extents))
            .map(|i| {
                let Some((b, r)) = self.blob_radius(followup) else { return false };
                unravel(i, &self.extents, &mut idx);
                let dist2: f64 = idx.iter().zip(&b.center).map(|(&x, c)| (x as f64 - c).powi(2)).sum();
                dist2 <= r * r
            })
            .collect()
    }

    /// Noise-free intensities.
    pub fn clean(&self, followup: bool) -> Tensor<f32> {
        let d = self.extents.len();
        let mask = self.blob_mask(followup);
        let mut idx = vec![0; d];
        let mut x = vec![0.0; d];
        Tensor::from_fn(self.extents.clone(), |i| {
            if mask[i] {
                return self.blob.as_ref().unwrap().intensity as f32;
            }
            unravel(i, &self.extents, &mut idx);
            for ax in 0..d {
                x[ax] = idx[ax] as f64;
            }
            if self.inside_tissue(&x) {
                self.tissue as f32
            } else {
                0.0
            }
        })
    }
}

fn add_noise(v: &Tensor<f32>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(v.shape().to_vec(), |i| {
        let x = v.data()[i];
        let z: f64 = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        (x as f64 + std * z).clamp(0.0, 1.0) as f32
    })
}

pub fn high_density_count(v: &Tensor<f32>) -> usize {
    v.data().iter().filter(|&&x| x > HIGH_DENSITY).count()
}

/// Renders both scans of a phantom with independent noise. Deterministic in `seed`.
pub fn synth_phantom_pair(spec: &PhantomSpec, seed: u64, id: impl Into<String>) -> Result<VolumePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = add_noise(&spec.clean(false), spec.noise_std, &mut rng);
    let followup = add_noise(&spec.clean(true), spec.noise_std, &mut rng);
    let grew = high_density_count(&followup) > high_density_count(&initial) + GROWTH_THRESHOLD;
    if grew != (spec.label == HEMORRHAGIC) {
        return Err(Error::Config(format!(
            "phantom violates the label rule: label {} but high-density growth {} -> {}",
            spec.label,
            high_density_count(&initial),
            high_density_count(&followup)
        )));
    }
    Ok(VolumePair { id: id.into(), initial, followup, label: spec.label, seed })
}

/// Draws a spec from `seed` and renders it.
pub fn random_phantom_pair(extents: &[usize], label: usize, seed: u64, id: impl Into<String>) -> Result<VolumePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PhantomSpec::random(extents, label, &mut rng)?;
    synth_phantom_pair(&spec, rng.random(), id).map(|mut p| {
        p.seed = seed;
        p
    })
}
