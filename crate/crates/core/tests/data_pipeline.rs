mod common;

use common::{rng, uniform};
use dtsw_core::data::{
    crop, flip_transpose, fold_assignment, fold_split, generate_dataset, manifest_to_string, min_max_normalize,
    parse_manifest, random_crop, random_flip, Dataset, ManifestEntry, VolumePair, MANIFEST_NAME,
};
use dtsw_core::data::{
    high_density_count, random_phantom_pair, synth_phantom_pair, Blob, PhantomSpec, GROWTH_THRESHOLD, HEMORRHAGIC,
    NON_HEMORRHAGIC,
};
use dtsw_core::data::{load_rvol, read_rvol, save_rvol, write_rvol, RVOL_MAGIC};
use dtsw_core::Tensor;
use proptest::prelude::*;

fn spec(extents: &[usize], blob: Option<Blob>, label: usize) -> PhantomSpec {
    let center: Vec<f64> = extents.iter().map(|&e| (e as f64 - 1.0) / 2.0).collect();
    let radii: Vec<f64> = extents.iter().map(|&e| e as f64 * 0.4).collect();
    PhantomSpec { extents: extents.to_vec(), center, radii, tissue: 0.3, noise_std: 0.02, blob, label }
}

#[test]
fn grown_blob_has_eight_times_the_voxels_in_3d() {
    let b = Blob { center: vec![15.5, 15.5, 15.5], radius: 3.0, intensity: 0.8, growth: 2.0 };
    let s = spec(&[32, 32, 32], Some(b.clone()), HEMORRHAGIC);
    let count = |followup| s.blob_mask(followup).iter().filter(|&&m| m).count() as f64;
    // lattice points inside a ball centred between voxels
    let oracle = |r: f64| {
        let mut n = 0usize;
        for x in 0..32 {
            for y in 0..32 {
                for z in 0..32 {
                    let d2 = [x, y, z].iter().map(|&v| (v as f64 - 15.5).powi(2)).sum::<f64>();
                    n += (d2 <= r * r) as usize;
                }
            }
        }
        n as f64
    };
    assert_eq!(count(false), oracle(3.0));
    assert_eq!(count(true), oracle(6.0));
    let ratio = count(true) / count(false);
    assert!((ratio - 8.0).abs() / 8.0 < 0.25, "ratio {ratio}");

    let pair = synth_phantom_pair(&s, 5, "p").unwrap();
    assert!(high_density_count(&pair.followup) > high_density_count(&pair.initial) + GROWTH_THRESHOLD);
}

#[test]
fn non_hemorrhagic_pairs_differ_only_by_noise() {
    for seed in 0..20 {
        let pair = random_phantom_pair(&[64, 64], NON_HEMORRHAGIC, seed, "n").unwrap();
        let max = pair.initial.data().iter().zip(pair.followup.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max < 0.1, "seed {seed}: {max}");
    }
}

#[test]
fn phantoms_are_deterministic_and_in_range() {
    for label in [NON_HEMORRHAGIC, HEMORRHAGIC] {
        for extents in [vec![64, 64], vec![32, 32, 32]] {
            let a = random_phantom_pair(&extents, label, 11, "a").unwrap();
            let b = random_phantom_pair(&extents, label, 11, "a").unwrap();
            assert_eq!(a, b);
            assert!(a.initial.data().iter().chain(b.followup.data()).all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.label, label);
        }
    }
    let a = random_phantom_pair(&[64, 64], HEMORRHAGIC, 11, "a").unwrap();
    let c = random_phantom_pair(&[64, 64], HEMORRHAGIC, 12, "a").unwrap();
    assert_ne!(a.initial, c.initial);
}

#[test]
fn invalid_specs_are_rejected() {
    let outside = Blob { center: vec![2.0, 2.0], radius: 3.0, intensity: 0.8, growth: 1.0 };
    assert!(synth_phantom_pair(&spec(&[32, 32], Some(outside), NON_HEMORRHAGIC), 0, "x").is_err());
    let grows_out = Blob { center: vec![15.5, 15.5], radius: 4.0, intensity: 0.8, growth: 3.5 };
    assert!(synth_phantom_pair(&spec(&[32, 32], Some(grows_out), HEMORRHAGIC), 0, "x").is_err());
    // hemorrhagic label without growth breaks the label rule
    let still = Blob { center: vec![15.5, 15.5], radius: 3.0, intensity: 0.8, growth: 1.0 };
    assert!(synth_phantom_pair(&spec(&[32, 32], Some(still.clone()), HEMORRHAGIC), 0, "x").is_err());
    assert!(synth_phantom_pair(&spec(&[32, 32], Some(still), NON_HEMORRHAGIC), 0, "x").is_ok());
    assert!(random_phantom_pair(&[32, 32], 2, 0, "x").is_err());
}

#[test]
fn min_max_closed_forms() {
    let v = Tensor::new([3], vec![2.0f32, 4.0, 6.0]).unwrap();
    assert_eq!(min_max_normalize(&v).data(), &[0.0, 0.5, 1.0]);
    assert_eq!(min_max_normalize(&Tensor::full([4], 7.0f32)).data(), &[0.0; 4]);
    let u = Tensor::new([4], vec![0.0f32, 0.25, 1.0, 0.5]).unwrap();
    assert_eq!(min_max_normalize(&u), u);
}

proptest! {
    #[test]
    fn min_max_output_spans_unit_interval(data in proptest::collection::vec(-1e3f32..1e3, 2..64)) {
        let v = Tensor::new([data.len()], data).unwrap();
        let n = min_max_normalize(&v);
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let (lo, hi) = n.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        prop_assert!(lo == 0.0 && (hi == 1.0 || hi == 0.0));
    }

    #[test]
    fn folds_partition_and_stratify(labels in proptest::collection::vec(0usize..2, 5..120), k in 2usize..6, seed in 0u64..1000) {
        prop_assume!(labels.len() >= k);
        let folds = fold_split(&labels, k, seed).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
        for f in &folds {
            let got = f.iter().filter(|&&i| labels[i] == 1).count() as f64;
            prop_assert!((got - pos * f.len() as f64).abs() <= 1.0 + 1e-9, "fold {:?}", f);
        }
    }
}

#[test]
fn two_hundred_samples_make_five_folds_of_forty() {
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let folds = fold_split(&labels, 5, 3).unwrap();
    for f in &folds {
        assert_eq!(f.len(), 40);
        assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 20);
    }
    assert_eq!(fold_assignment(&labels, 5, 3).unwrap(), fold_assignment(&labels, 5, 3).unwrap());
    assert!(fold_split(&labels[..3], 5, 0).is_err());
}

/// Each voxel stores its own coordinates, so a crop reveals its offset.
fn marker(extents: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(extents.to_vec(), |i| i as f32)
}

fn offset_of(c: &Tensor<f32>, extents: &[usize]) -> Vec<usize> {
    let mut flat = c.data()[0] as usize;
    let mut off = vec![0; extents.len()];
    for ax in (0..extents.len()).rev() {
        off[ax] = flat % extents[ax];
        flat /= extents[ax];
    }
    off
}

#[test]
fn random_crop_keeps_pairs_aligned() {
    for extents in [vec![20usize, 24], vec![10, 12, 14]] {
        let m = marker(&extents);
        let pair = VolumePair { id: "m".into(), initial: m.clone(), followup: m.clone(), label: 1, seed: 0 };
        let size: Vec<usize> = extents.iter().map(|e| e / 2).collect();
        for seed in 0..25 {
            let c = random_crop(&pair, &size, seed).unwrap();
            assert_eq!(c.initial, c.followup);
            let off = offset_of(&c.initial, &extents);
            assert_eq!(c.initial, crop(&m, &off, &size).unwrap());
            assert_eq!(c, random_crop(&pair, &size, seed).unwrap());
            assert_eq!(c.label, 1);
        }
        assert_eq!(random_crop(&pair, &extents, 4).unwrap(), pair);
        let too_big: Vec<usize> = extents.iter().map(|e| e + 1).collect();
        assert!(random_crop(&pair, &too_big, 0).is_err());
    }
}

#[test]
fn random_flip_keeps_pairs_aligned() {
    for (extents, variants) in [(vec![6usize, 6], 8), (vec![6, 8], 4), (vec![4, 6, 6], 16)] {
        let m = marker(&extents);
        let shifted = m.map(|x| x + 1000.0);
        let pair = VolumePair { id: "m".into(), initial: m.clone(), followup: shifted, label: 1, seed: 0 };
        let mut seen = std::collections::HashSet::new();
        for seed in 0..200 {
            let f = random_flip(&pair, seed).unwrap();
            assert_eq!(f.followup, f.initial.map(|x| x + 1000.0));
            assert_eq!(f.initial.shape(), extents.as_slice());
            assert_eq!(f.label, 1);
            assert_eq!(f, random_flip(&pair, seed).unwrap());
            let mut sorted = f.initial.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            assert_eq!(sorted, m.data());
            seen.insert(f.initial.data().iter().map(|&x| x as u32).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), variants, "{extents:?}");
    }
}

#[test]
fn flip_transpose_moves_voxels_as_expected() {
    let m = marker(&[3, 4]);
    let f = flip_transpose(&m, &[true, false], false).unwrap();
    assert_eq!(f.data()[0], 8.0);
    let f = flip_transpose(&m, &[false, true], false).unwrap();
    assert_eq!(f.data()[0], 3.0);
    assert!(flip_transpose(&m, &[false, false], true).is_err());
    let sq = marker(&[3, 3]);
    let t = flip_transpose(&sq, &[false, false], true).unwrap();
    assert_eq!(t.data(), &[0.0, 3.0, 6.0, 1.0, 4.0, 7.0, 2.0, 5.0, 8.0]);
    for flip in [[true, false], [false, true], [true, true]] {
        let once = flip_transpose(&sq, &flip, false).unwrap();
        assert_eq!(flip_transpose(&once, &flip, false).unwrap(), sq);
    }
}

#[test]
fn rvol_round_trip_and_errors() {
    let v: Tensor<f32> = uniform(&[16, 16, 16], -1.0, 1.0, &mut rng(1));
    let mut buf = Vec::new();
    write_rvol(&mut buf, &v).unwrap();
    assert_eq!(&buf[..8], RVOL_MAGIC);
    let back = read_rvol(&mut buf.as_slice()).unwrap();
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.shape(), v.shape());

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_rvol(&mut bad.as_slice()).is_err());
    assert!(read_rvol(&mut &buf[..buf.len() - 3]).is_err());
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(read_rvol(&mut trailing.as_slice()).is_err());
    let mut huge = buf[..8].to_vec();
    huge.extend_from_slice(&3u32.to_le_bytes());
    for _ in 0..3 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(read_rvol(&mut huge.as_slice()).is_err());

    assert!(write_rvol(&mut Vec::new(), &Tensor::<f32>::full(Vec::new(), 1.0)).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.rvol");
    save_rvol(&path, &v).unwrap();
    assert_eq!(load_rvol(&path).unwrap(), v);
    assert!(load_rvol(&dir.path().join("missing.rvol")).is_err());
}

#[test]
fn manifest_round_trip_and_errors() {
    let entries = vec![
        ManifestEntry { id: "a".into(), initial: "a_i.rvol".into(), followup: "a_f.rvol".into(), label: 0, fold: 1 },
        ManifestEntry { id: "b".into(), initial: "b_i.rvol".into(), followup: "b_f.rvol".into(), label: 1, fold: 0 },
    ];
    let text = manifest_to_string(&entries);
    assert_eq!(parse_manifest(&text).unwrap(), entries);
    assert!(parse_manifest("a\tb\tc\n").is_err());
    assert!(parse_manifest(&text.replace("\t1\t0", "\tx\t0")).is_err());
}

#[test]
fn generated_dataset_loads_with_stratified_folds() {
    let dir = tempfile::tempdir().unwrap();
    let entries = generate_dataset(dir.path(), 10, 5, &[32, 32], 9).unwrap();
    assert_eq!(entries.len(), 10);
    let data = Dataset::load(&dir.path().join(MANIFEST_NAME), false).unwrap();
    assert_eq!(data.len(), 10);
    assert_eq!(data.folds(), 5);
    assert_eq!(data.labels().iter().filter(|&&l| l == 1).count(), 5);
    for k in 0..5 {
        let (train, test) = data.split(k);
        assert_eq!(test.len(), 2);
        assert_eq!(train.len(), 8);
        assert!(test.iter().all(|i| !train.contains(i)));
    }
    let again = tempfile::tempdir().unwrap();
    generate_dataset(again.path(), 10, 5, &[32, 32], 9).unwrap();
    let other = Dataset::load(&again.path().join(MANIFEST_NAME), false).unwrap();
    assert_eq!(data.pairs, other.pairs);

    let normalized = Dataset::load(&dir.path().join(MANIFEST_NAME), true).unwrap();
    for p in &normalized.pairs {
        let all: Vec<f32> = p.initial.data().iter().chain(p.followup.data()).copied().collect();
        assert_eq!(all.iter().cloned().fold(f32::MAX, f32::min), 0.0);
        assert_eq!(all.iter().cloned().fold(f32::MIN, f32::max), 1.0);
    }
}
