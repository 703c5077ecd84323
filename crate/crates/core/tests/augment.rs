use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specssl::augment::{
    drop_count, gaussian_blur, global_local_views, local_view, make_viewset, regular_augment,
    regular_augment_with, rotate90, spectral_aware_augment, zoom, RegularParams, ViewConfig, ViewKind,
};
use specssl::data::SpectralCube;
use specssl::{Error, Tensor};

fn random_cube(h: usize, w: usize, c: usize, seed: u64) -> SpectralCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Tensor::randn(&[h * w * c], 1.0, &mut rng).into_data();
    SpectralCube::new(h, w, c, data).unwrap().with_id(format!("cube{seed}"), "g0")
}

/// Band `c`, pixel `i` holds `i + 10000 c`, so every value names its origin.
fn index_cube(h: usize, w: usize, c: usize) -> SpectralCube {
    let data = (0..c).flat_map(|b| (0..h * w).map(move |i| (i + 10000 * b) as f32)).collect();
    SpectralCube::new(h, w, c, data).unwrap()
}

#[test]
fn identity_parameters_leave_cube_unchanged() {
    let cube = random_cube(12, 12, 3, 0);
    let out = regular_augment_with(&cube, &RegularParams::IDENTITY, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(out, cube);
}

#[test]
fn four_quarter_turns_restore_cube() {
    let cube = random_cube(9, 13, 2, 1);
    let mut r = cube.clone();
    for _ in 0..4 {
        r = rotate90(&r, 1);
    }
    assert_eq!(r, cube);
    assert_eq!(rotate90(&cube, 1).dims(), (13, 9, 2));
}

#[test]
fn quarter_turn_hand_case() {
    // [[0,1,2],[3,4,5]] rotated counter-clockwise is [[2,5],[1,4],[0,3]].
    let cube = index_cube(2, 3, 1);
    assert_eq!(rotate90(&cube, 1).data(), &[2., 5., 1., 4., 0., 3.]);
}

#[test]
fn bands_share_the_spatial_permutation() {
    let cube = index_cube(10, 10, 4);
    for k in 0..4 {
        let r = rotate90(&cube, k);
        for i in 0..100 {
            assert_eq!(r.band(3)[i] - 30000.0, r.band(0)[i]);
        }
    }
    let z = zoom(&cube, 1.17).unwrap();
    for i in 0..100 {
        assert!((z.band(3)[i] - 30000.0 - z.band(0)[i]).abs() < 1e-2);
    }
}

#[test]
fn blur_keeps_constant_planes_and_smooths_spikes() {
    let cube = SpectralCube::new(9, 9, 2, vec![2.5; 162]).unwrap();
    let b = gaussian_blur(&cube, 0.8).unwrap();
    assert!(b.data().iter().all(|v| (v - 2.5).abs() < 1e-6));

    let mut spike = SpectralCube::zeros(9, 9, 1);
    spike.set(4, 4, 0, 1.0);
    let b = gaussian_blur(&spike, 1.0).unwrap();
    assert!(b.get(4, 4, 0) < 1.0 && b.get(4, 5, 0) > 0.0);
    let total: f32 = b.data().iter().sum();
    assert!((total - 1.0).abs() < 1e-5);
}

#[test]
fn augmentation_preserves_shape_and_finiteness() {
    let cube = random_cube(16, 16, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let out = regular_augment(&cube, &mut rng).unwrap();
        assert_eq!(out.dims(), cube.dims());
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
    assert!(matches!(
        regular_augment(&random_cube(6, 16, 2, 0), &mut rng),
        Err(Error::Augmentation(_))
    ));
}

#[test]
fn local_area_fraction_and_offsets() {
    let cfg = ViewConfig::default();
    assert_eq!(cfg.local_size * cfg.local_size, 1296);
    let frac = (cfg.local_size * cfg.local_size) as f64 / (cfg.global_size * cfg.global_size) as f64;
    assert!((frac - 0.09).abs() < 1e-12);

    let cube = SpectralCube::zeros(120, 120, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let (v, crop) = local_view(&cube, 36, &mut rng).unwrap();
        assert_eq!(v.dims(), (36, 36, 1));
        assert!(crop.row <= 84 && crop.col <= 84);
    }
}

#[test]
fn global_local_defaults() {
    let cube = random_cube(120, 120, 2, 5);
    let (g, locals) = global_local_views(&cube, &ViewConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(g.dims(), (120, 120, 2));
    assert_eq!(locals.len(), 4);
    assert!(locals.iter().all(|l| l.dims() == (36, 36, 2)));
}

#[test]
fn half_of_twelve_channels_dropped() {
    let cube = random_cube(4, 4, 12, 6);
    let (out, dropped) = spectral_aware_augment(&cube, &mut ChaCha8Rng::seed_from_u64(0), 0.5).unwrap();
    assert_eq!(dropped.len(), 6);
    for c in 0..12 {
        if dropped.contains(&c) {
            assert!(out.band(c).iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(out.band(c), cube.band(c));
        }
    }
}

#[test]
fn drop_fraction_outside_range_rejected() {
    let cube = random_cube(4, 4, 12, 6);
    for f in [0.29, 0.51, -1.0] {
        assert!(matches!(
            spectral_aware_augment(&cube, &mut ChaCha8Rng::seed_from_u64(0), f),
            Err(Error::Parameter(_))
        ));
    }
    assert!(drop_count(3, 0.4).is_err());
}

#[test]
fn drop_count_stays_in_range_for_small_channel_counts() {
    for c in 4..200 {
        for f in [0.3, 0.35, 0.4, 0.45, 0.5] {
            let k = drop_count(c, f).unwrap();
            let share = k as f64 / c as f64;
            assert!((0.3..=0.5).contains(&share), "C={c} f={f} k={k}");
        }
    }
}

#[test]
fn default_viewset_cardinality_and_provenance() {
    let cube = random_cube(120, 120, 8, 7);
    let cfg = ViewConfig::default();
    let set = make_viewset(&cube, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(set.global_views.len(), 2);
    assert_eq!(set.local_views.len(), 4);
    assert_eq!(set.spectral_views.len(), 1);
    assert_eq!(set.provenance.len(), 7);
    assert!(set.provenance.iter().all(|p| p.cube_id == "cube7"));
    assert_eq!(set.provenance[6].kind, ViewKind::Spectral);
    assert!(!set.provenance[6].dropped.is_empty());
    assert_eq!(set.spectral_views[0].dims(), (120, 120, 8));
}

#[test]
fn viewset_is_deterministic_per_seed() {
    let cube = random_cube(24, 24, 6, 8);
    let cfg = ViewConfig::scaled(24, 12);
    let a = make_viewset(&cube, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = make_viewset(&cube, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let c = make_viewset(&cube, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn local_views_must_stay_under_half_area() {
    let cfg = ViewConfig::scaled(24, 17);
    assert!(cfg.validate().is_err());
    assert!(ViewConfig::scaled(24, 16).validate().is_ok());
}
