//! Phantom data, volume files, normalization, cropping, and fold splits.

mod phantom;
mod rvol;

pub use phantom::{
    high_density_count, random_phantom_pair, synth_phantom_pair, Blob, PhantomSpec, GROWTH_THRESHOLD, HEMORRHAGIC,
    HIGH_DENSITY, NON_HEMORRHAGIC,
};
pub use rvol::{load_rvol, read_rvol, save_rvol, write_rvol, RVOL_MAGIC, RVOL_MAX_ELEMENTS};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::unravel;
use crate::tensor::{numel, strides, Tensor};

/// Aligned initial and follow-up scans with the prognostic label.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePair {
    pub id: String,
    pub initial: Tensor<f32>,
    pub followup: Tensor<f32>,
    pub label: usize,
    pub seed: u64,
}

/// `(x - min) / (max - min)`; a constant volume maps to zeros.
pub fn min_max_normalize(v: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = v.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Tensor::zeros(v.shape().to_vec());
    }
    v.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
}

/// Copies the box `[offset, offset + extents)` out of `v`.
pub fn crop(v: &Tensor<f32>, offset: &[usize], extents: &[usize]) -> Result<Tensor<f32>> {
    let s = v.shape();
    if offset.len() != s.len() || extents.len() != s.len() || (0..s.len()).any(|a| offset[a] + extents[a] > s[a]) {
        return Err(Error::shape(format!("crop {extents:?} at {offset:?} outside volume {s:?}")));
    }
    let st = strides(s);
    let mut idx = vec![0; s.len()];
    Ok(Tensor::from_fn(extents.to_vec(), |i| {
        unravel(i, extents, &mut idx);
        let flat: usize = idx.iter().zip(offset).zip(&st).map(|((i, o), s)| (i + o) * s).sum();
        v.data()[flat]
    }))
}

/// Crops both scans with one window drawn from `seed`.
pub fn random_crop(pair: &VolumePair, extents: &[usize], seed: u64) -> Result<VolumePair> {
    let s = pair.initial.shape();
    if pair.followup.shape() != s {
        return Err(Error::shape(format!("pair {} has mismatched extents", pair.id)));
    }
    if extents.len() != s.len() || extents.iter().zip(s).any(|(c, e)| c > e || *c == 0) {
        return Err(Error::shape(format!("crop {extents:?} larger than volume {s:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: Vec<usize> = extents.iter().zip(s).map(|(c, e)| rng.random_range(0..=e - c)).collect();
    Ok(VolumePair {
        id: pair.id.clone(),
        initial: crop(&pair.initial, &offset, extents)?,
        followup: crop(&pair.followup, &offset, extents)?,
        label: pair.label,
        seed: pair.seed,
    })
}

/// `v` with the axes in `flip` reversed, then the last two axes swapped if
/// `transpose` (which requires them to have equal extents).
pub fn flip_transpose(v: &Tensor<f32>, flip: &[bool], transpose: bool) -> Result<Tensor<f32>> {
    let s = v.shape();
    let d = s.len();
    if flip.len() != d || (transpose && (d < 2 || s[d - 1] != s[d - 2])) {
        return Err(Error::shape(format!("flip {flip:?} / transpose {transpose} invalid for volume {s:?}")));
    }
    let st = strides(s);
    let mut idx = vec![0; d];
    Ok(Tensor::from_fn(s.to_vec(), |i| {
        unravel(i, s, &mut idx);
        if transpose {
            idx.swap(d - 1, d - 2);
        }
        let flat: usize = (0..d).map(|a| if flip[a] { s[a] - 1 - idx[a] } else { idx[a] } * st[a]).sum();
        v.data()[flat]
    }))
}

/// Applies one random flip/transpose drawn from `seed` to both scans. Each
/// axis flips with probability 1/2; the last two axes swap with probability
/// 1/2 when their extents are equal. Labels are unchanged.
pub fn random_flip(pair: &VolumePair, seed: u64) -> Result<VolumePair> {
    let s = pair.initial.shape();
    if pair.followup.shape() != s {
        return Err(Error::shape(format!("pair {} has mismatched extents", pair.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip: Vec<bool> = s.iter().map(|_| rng.random()).collect();
    let d = s.len();
    let transpose = d >= 2 && s[d - 1] == s[d - 2] && rng.random();
    Ok(VolumePair {
        id: pair.id.clone(),
        initial: flip_transpose(&pair.initial, &flip, transpose)?,
        followup: flip_transpose(&pair.followup, &flip, transpose)?,
        label: pair.label,
        seed: pair.seed,
    })
}

/// Stratified `k`-fold assignment: returns the fold of every sample.
/// Each class is shuffled and dealt round-robin, continuing the deal
/// across classes, so fold sizes differ by at most one and so do the
/// per-fold counts of each class.
pub fn fold_assignment(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || labels.len() < k {
        return Err(Error::invalid(format!("cannot split {} samples into {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut fold = vec![0; labels.len()];
    let mut deal = 0;
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = deal % k;
            deal += 1;
        }
    }
    Ok(fold)
}

/// `k` disjoint, sorted index sets covering `0..labels.len()`.
pub fn fold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let fold = fold_assignment(labels, k, seed)?;
    let mut out = vec![Vec::new(); k];
    for (i, f) in fold.into_iter().enumerate() {
        out[f].push(i);
    }
    Ok(out)
}

/// One manifest line: id, initial path, follow-up path, label, fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub initial: PathBuf,
    pub followup: PathBuf,
    pub label: usize,
    pub fold: usize,
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.id, e.initial.display(), e.followup.display(), e.label, e.fold));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Format(format!("manifest line {}: {what}: {line:?}", n + 1));
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        out.push(ManifestEntry {
            id: f[0].to_string(),
            initial: PathBuf::from(f[1]),
            followup: PathBuf::from(f[2]),
            label: f[3].parse().map_err(|_| bad("bad label"))?,
            fold: f[4].parse().map_err(|_| bad("bad fold"))?,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Per-sample seed derived from the dataset seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `n` phantom pairs with alternating labels into `dir` plus a
/// manifest with stratified folds. Paths in the manifest are relative to `dir`.
pub fn generate_dataset(dir: &Path, n: usize, k: usize, extents: &[usize], seed: u64) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let folds = fold_assignment(&labels, k, seed)?;
    let mut entries = Vec::with_capacity(n);
    for (i, (&label, &fold)) in labels.iter().zip(&folds).enumerate() {
        let id = format!("phantom_{i:04}");
        let pair = random_phantom_pair(extents, label, sample_seed(seed, i), id.clone())?;
        let e = ManifestEntry {
            initial: PathBuf::from(format!("{id}_initial.rvol")),
            followup: PathBuf::from(format!("{id}_followup.rvol")),
            id,
            label,
            fold,
        };
        save_rvol(&dir.join(&e.initial), &pair.initial)?;
        save_rvol(&dir.join(&e.followup), &pair.followup)?;
        entries.push(e);
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest_to_string(&entries)).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// A loaded dataset: manifest entries and their volumes, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub pairs: Vec<VolumePair>,
}

impl Dataset {
    /// Loads every pair listed in a manifest; relative paths resolve
    /// against the manifest's directory. With `normalize`, each pair is
    /// min-max normalized jointly so that both scans share one intensity map.
    pub fn load(manifest: &Path, normalize: bool) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::with_capacity(entries.len());
        for e in &entries {
            let mut initial = load_rvol(&base.join(&e.initial))?;
            let mut followup = load_rvol(&base.join(&e.followup))?;
            if initial.shape() != followup.shape() {
                return Err(Error::Format(format!("{}: initial and follow-up extents differ", e.id)));
            }
            if normalize {
                (initial, followup) = normalize_pair(&initial, &followup);
            }
            pairs.push(VolumePair { id: e.id.clone(), initial, followup, label: e.label, seed: 0 });
        }
        Ok(Dataset { entries, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.label).collect()
    }

    pub fn folds(&self) -> usize {
        self.entries.iter().map(|e| e.fold + 1).max().unwrap_or(0)
    }

    /// Sample indices `(train, test)` for holding out `fold`.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.entries[i].fold != fold)
    }
}

/// Min-max normalization with one shared range for both scans.
pub fn normalize_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let joined =
        Tensor::from_fn([a.numel() + b.numel()], |i| if i < a.numel() { a.data()[i] } else { b.data()[i - a.numel()] });
    let n = min_max_normalize(&joined).into_data();
    let (x, y) = n.split_at(a.numel());
    (Tensor::new(a.shape().to_vec(), x.to_vec()).unwrap(), Tensor::new(b.shape().to_vec(), y.to_vec()).unwrap())
}

/// Identity alignment hook. Phantom pairs are generated aligned; external
/// data would be registered here before entering the pipeline.
pub fn align_pair(pair: VolumePair) -> VolumePair {
    pair
}

/// Stacks volumes of equal extents into a batch `[B, extents..]`.
pub fn stack(vols: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = vols.first().ok_or_else(|| Error::invalid("cannot stack zero volumes"))?;
    let n = first.numel();
    if vols.iter().any(|v| v.shape() != first.shape()) {
        return Err(Error::shape("cannot stack volumes of different extents"));
    }
    let mut shape = vec![vols.len()];
    shape.extend(first.shape());
    let mut data = Vec::with_capacity(n * vols.len());
    for v in vols {
        data.extend_from_slice(v.data());
    }
    debug_assert_eq!(data.len(), numel(&shape));
    Tensor::new(shape, data)
}
