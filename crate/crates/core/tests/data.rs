use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specssl::data::{
    extract_profiles, generate_synthetic, load_dataset, read_cube, split_manifest, write_cube, write_dataset,
    Manifest, ManifestEntry, SpectralCube, Split, SynthConfig,
};
use specssl::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn committed_fixture_parses_to_known_values() {
    let cube = read_cube(fixture("cube_2x2x3.scub")).unwrap();
    assert_eq!(cube.dims(), (2, 2, 3));
    assert_eq!(cube.band(0), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(cube.band(1), &[-0.5, 0.25, 8.0, 16.0]);
    assert_eq!(cube.band(2), &[100.0, 200.0, 300.0, 400.0]);
    assert_eq!(cube.get(1, 0, 1), 8.0);
    assert_eq!(cube.spectrum(0, 1), vec![2.0, 0.25, 200.0]);
    assert_eq!(cube.band_centers, None);
    assert_eq!(cube.cube_id, "cube_2x2x3");
}

#[test]
fn fixture_bytes_are_reproduced_by_the_writer() {
    let bytes = std::fs::read(fixture("cube_2x2x3.scub")).unwrap();
    let cube = SpectralCube::from_bytes(&bytes).unwrap();
    assert_eq!(cube.to_bytes(), bytes);
}

#[test]
fn truncated_file_reports_missing_bytes() {
    let bytes = std::fs::read(fixture("cube_2x2x3.scub")).unwrap();
    let err = SpectralCube::from_bytes(&bytes[..60]).unwrap_err();
    assert!(err.to_string().contains("7 missing"), "{err}");
    assert!(matches!(err, Error::Format { .. }));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(SpectralCube::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
}

proptest! {
    #[test]
    fn scub_round_trip_is_bit_exact(
        h in 1usize..5, w in 1usize..5, c in 1usize..4,
        seed in any::<u64>(), centers in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * c).map(|_| f32::from_bits(rand::Rng::random::<u32>(&mut rng) & 0x7f7f_ffff)).collect();
        let mut cube = SpectralCube::new(h, w, c, data).unwrap();
        if centers {
            cube.band_centers = Some((0..c).map(|i| 400.0 + i as f32).collect());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.scub");
        write_cube(&cube, &path).unwrap();
        let back = read_cube(&path).unwrap();
        prop_assert_eq!(back.dims(), cube.dims());
        let bits = |c: &SpectralCube| c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&cube));
        prop_assert_eq!(back.band_centers, cube.band_centers);
    }
}

#[test]
fn profiles_from_60x60_at_stride_3() {
    let cube = SpectralCube::zeros(60, 60, 2);
    assert_eq!(extract_profiles(&cube, 3).unwrap().len(), 400);
}

#[test]
fn constant_cube_gives_constant_profiles() {
    let cube = SpectralCube::new(9, 12, 2, [vec![0.7; 108], vec![-3.0; 108]].concat()).unwrap();
    let b = extract_profiles(&cube, 3).unwrap();
    for i in 0..b.len() {
        assert_eq!(b.profile(i), &[0.7, -3.0]);
    }
}

#[test]
fn six_by_six_block_means() {
    let data: Vec<f32> = (0..72).map(|v| v as f32).collect();
    let cube = SpectralCube::new(6, 6, 2, data).unwrap();
    let b = extract_profiles(&cube, 3).unwrap();
    assert_eq!(b.len(), 4);
    // Top-left block of band 0 holds 0,1,2,6,7,8,12,13,14 (mean 7).
    let expected = [(0, 0, 7.0), (0, 3, 10.0), (3, 0, 25.0), (3, 3, 28.0)];
    for (i, (r, c, m)) in expected.iter().enumerate() {
        assert_eq!((b.coords[i].1, b.coords[i].2), (*r, *c));
        assert!((b.profile(i)[0] - m).abs() < 1e-5);
        assert!((b.profile(i)[1] - (m + 36.0)).abs() < 1e-5);
    }
    assert!(matches!(extract_profiles(&SpectralCube::zeros(2, 6, 1), 3), Err(Error::Contract(_))));
}

fn small_synth(noise: f64) -> SynthConfig {
    SynthConfig {
        n_cubes: 12,
        height: 10,
        width: 10,
        channels: 16,
        n_endmembers: 4,
        noise_sigma: noise,
        scene_cols: 4,
        ..SynthConfig::default()
    }
}

#[test]
fn noiseless_pixels_are_convex_combinations() {
    let data = generate_synthetic(&small_synth(0.0)).unwrap();
    let (e_n, c) = (4, 16);
    for sc in &data.cubes {
        for r in 0..10 {
            for col in 0..10 {
                let a: Vec<f64> = (0..e_n).map(|e| sc.abundances.get(r, col, e) as f64).collect();
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(a.iter().all(|&v| v >= 0.0));
                for band in 0..c {
                    let mix: f64 = (0..e_n).map(|e| a[e] * data.endmembers[e * c + band] as f64).sum();
                    assert!((mix - sc.cube.get(r, col, band) as f64).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn targets_and_labels_recomputed_from_abundances() {
    let cfg = small_synth(0.01);
    let data = generate_synthetic(&cfg).unwrap();
    for sc in &data.cubes {
        let mean: Vec<f64> = (0..4)
            .map(|e| sc.abundances.band(e).iter().map(|&v| v as f64).sum::<f64>() / 100.0)
            .collect();
        for m in 0..cfg.n_targets {
            let t: f64 = (0..4).map(|e| data.target_map[m * 4 + e] * mean[e]).sum();
            assert!((t - sc.targets[m] as f64).abs() < 1e-5);
        }
        for e in 0..4 {
            assert_eq!(sc.labels[e], u8::from(sc.mean_abundance[e] > cfg.label_threshold));
        }
    }
}

#[test]
fn synth_config_validation() {
    let mut cfg = small_synth(0.0);
    cfg.channels = 7;
    assert!(generate_synthetic(&cfg).is_err());
    cfg = small_synth(0.0);
    cfg.n_endmembers = 1;
    assert!(generate_synthetic(&cfg).is_err());
    cfg = small_synth(0.0);
    cfg.n_cubes = 0;
    assert!(generate_synthetic(&cfg).is_err());
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate_synthetic(&small_synth(0.01)).unwrap();
    let b = generate_synthetic(&small_synth(0.01)).unwrap();
    assert_eq!(a, b);
}

fn entries(groups: usize, per_group: usize) -> Vec<ManifestEntry> {
    (0..groups * per_group)
        .map(|i| ManifestEntry {
            cube_id: format!("c{i}"),
            path: PathBuf::from(format!("cubes/c{i}.scub")),
            geo_group: format!("g{}", i / per_group),
            split: Split::Train,
            labels: vec![(i % 2) as u8],
            targets: vec![i as f32],
        })
        .collect()
}

fn val_groups(m: &Manifest) -> BTreeSet<String> {
    m.split(Split::Val).map(|e| e.geo_group.clone()).collect()
}

#[test]
fn ten_equal_groups_give_three_val_groups() {
    let m = split_manifest(entries(10, 4), 0.3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(val_groups(&m).len(), 3);
}

#[test]
fn splits_never_share_groups_and_are_seeded() {
    for seed in 0..50 {
        let m = split_manifest(entries(7, 3), 0.25, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let train: BTreeSet<String> = m.split(Split::Train).map(|e| e.geo_group.clone()).collect();
        assert!(train.is_disjoint(&val_groups(&m)));
        assert!(!train.is_empty() && !val_groups(&m).is_empty());
        let again = split_manifest(entries(7, 3), 0.25, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(m, again);
    }
}

#[test]
fn single_group_cannot_be_split() {
    assert!(matches!(
        split_manifest(entries(1, 5), 0.3, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Split(_))
    ));
}

#[test]
fn manifest_load_rejects_shared_groups() {
    let mut e = entries(2, 2);
    e[0].split = Split::Val;
    assert!(matches!(Manifest::new(e), Err(Error::Split(_))));
}

#[test]
fn dataset_directory_round_trip() {
    let data = generate_synthetic(&small_synth(0.01)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &data, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (loaded, cubes) = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, manifest);
    assert_eq!(cubes.len(), 12);
    for (c, sc) in cubes.iter().zip(&data.cubes) {
        assert_eq!(c, &sc.cube);
    }
    for f in ["labels.csv", "targets.csv", "mean_abundance.csv", "endmembers.csv", "target_map.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
