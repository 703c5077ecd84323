use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specssl::autodiff::Tape;
use specssl::data::{generate_synthetic, SynthConfig};
use specssl::downstream::{
    bce_multilabel_loss, bce_with_logits, extract_features, fraction_csv, label_fraction_study,
    multilabel_head_forward, nested_stratified_subsets, regression_head_forward, run_probe, FinetuneDepth, HeadKind,
    LabeledSet, ProbeConfig, ProbeMode,
};
use specssl::transformer::{EncoderConfig, EncoderState, TokenKind};
use specssl::{Error, Tensor};

fn spatial_encoder(channels: usize, seed: u64) -> EncoderState {
    let cfg = EncoderConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_hidden: 16,
        num_blocks: 2,
        token_kind: TokenKind::SpatialPatch { patch_size: 4, channels },
        max_tokens: 32,
    };
    EncoderState::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn spectral_encoder(channels: usize) -> EncoderState {
    let cfg = EncoderConfig {
        embed_dim: 8,
        num_heads: 2,
        mlp_hidden: 16,
        num_blocks: 2,
        token_kind: TokenKind::SpectralBand { group_size: 2, channels },
        max_tokens: 32,
    };
    EncoderState::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn labeled(n: usize, seed: u64) -> LabeledSet {
    let data = generate_synthetic(&SynthConfig {
        n_cubes: n,
        height: 8,
        width: 8,
        channels: 6,
        n_endmembers: 3,
        n_targets: 2,
        scene_cols: 2,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    LabeledSet::from_synth(&data.cubes).unwrap()
}

fn scalar_head(tape: &mut Tape, w: f32, b: f32, x: f32, sigmoid: bool) -> f32 {
    let x = tape.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
    let w = tape.constant(Tensor::new(vec![1, 1], vec![w]).unwrap());
    let b = tape.constant(Tensor::new(vec![1], vec![b]).unwrap());
    let y = if sigmoid {
        multilabel_head_forward(tape, x, w, b).unwrap()
    } else {
        regression_head_forward(tape, x, w, b).unwrap()
    };
    tape.scalar(y)
}

#[test]
fn sigmoid_head_examples() {
    let mut tape = Tape::new();
    assert_eq!(scalar_head(&mut tape, 0.0, 0.0, 3.0, true), 0.5);
    assert!((scalar_head(&mut tape, 1.0, 0.0, 3f32.ln(), true) - 0.75).abs() < 1e-6);
    let lo = scalar_head(&mut tape, 2.0, 0.1, 0.5, true);
    let hi = scalar_head(&mut tape, 2.0, 0.1, 0.6, true);
    assert!(hi > lo && hi < 1.0 && lo > 0.0);
}

#[test]
fn regression_head_with_zero_weights_returns_bias() {
    let mut tape = Tape::new();
    assert_eq!(scalar_head(&mut tape, 0.0, 1.25, 9.0, false), 1.25);
}

#[test]
fn bce_examples() {
    let half = bce_multilabel_loss(&[0.5; 6], &[1, 0, 1, 1, 0, 0]).unwrap();
    assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce_multilabel_loss(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap() < 1e-9);
    assert!(matches!(bce_multilabel_loss(&[0.5, 0.5], &[1, 2]), Err(Error::Contract(_))));

    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let l = bce_with_logits(&mut tape, z, &[1, 0, 0, 1]).unwrap();
    assert!((tape.scalar(l) as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    let z = tape.constant(Tensor::new(vec![1, 2], vec![1e4, -1e4]).unwrap());
    let l = bce_with_logits(&mut tape, z, &[1, 0]).unwrap();
    assert!(tape.scalar(l).is_finite() && tape.scalar(l) < 1e-6);
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(bce_with_logits(&mut tape, z, &[1, 3]), Err(Error::Contract(_))));
}

#[test]
fn probe_config_invariants() {
    let mut cfg = ProbeConfig::probe(HeadKind::MultiLabel(3));
    assert_eq!(cfg.encoder_lr, 0.0);
    cfg.encoder_lr = 1e-6;
    assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    let ft = ProbeConfig::finetune(HeadKind::Regression(4));
    assert_eq!(ft.encoder_lr, 1e-6);
    assert_eq!(ft.head.outputs(), 4);
    assert!(ft.validate().is_ok());
}

#[test]
fn linear_targets_are_fitted_exactly() {
    let enc = spatial_encoder(6, 0);
    let mut set = labeled(24, 1);
    let feats = extract_features(&enc, &set.cubes, 4).unwrap();
    let d = feats.shape()[1];
    // Targets are an exact affine map of the frozen features.
    set.targets = (0..set.len())
        .flat_map(|i| {
            let row = feats.row(i).to_vec();
            (0..2).map(move |m| {
                row.iter().enumerate().map(|(j, v)| v * ((j + m) % 3) as f32 - 0.1 * j as f32 * v).sum::<f32>()
                    + m as f32
            })
        })
        .collect();
    assert_eq!(d, 8);
    let mut cfg = ProbeConfig::probe(HeadKind::Regression(2));
    cfg.epochs = 2000;
    cfg.warmup_epochs = 5;
    let out = run_probe(&enc, &set, &set, &cfg).unwrap();
    let r2 = out.report.r2.unwrap();
    assert!(r2 > 0.999, "train R² {r2}");
}

#[test]
fn multilabel_loss_decreases() {
    let enc = spatial_encoder(6, 0);
    let set = labeled(16, 2);
    let mut cfg = ProbeConfig::probe(HeadKind::MultiLabel(set.n_labels));
    cfg.epochs = 40;
    cfg.warmup_epochs = 2;
    let out = run_probe(&enc, &set, &set, &cfg).unwrap();
    assert!(out.trace.last().unwrap().loss < out.trace[0].loss);
    assert!(out.report.f1_macro.is_finite());
}

#[test]
fn probe_leaves_encoder_checkpoint_untouched() {
    let enc = spatial_encoder(6, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    enc.to_checkpoint().unwrap().save(&path).unwrap();
    let before = std::fs::read(&path).unwrap();
    let loaded = EncoderState::from_checkpoint(&specssl::checkpoint::Checkpoint::load(&path).unwrap()).unwrap();
    let set = labeled(10, 3);
    let mut cfg = ProbeConfig::probe(HeadKind::MultiLabel(set.n_labels));
    cfg.epochs = 5;
    let out = run_probe(&loaded, &set, &set, &cfg).unwrap();
    assert_eq!(out.encoder.params.checksum(), enc.params.checksum());
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn finetune_at_zero_rate_equals_probe() {
    for enc in [spatial_encoder(6, 5), spectral_encoder(6)] {
        let train = labeled(12, 4);
        let val = labeled(6, 5);
        let mut probe = ProbeConfig::probe(HeadKind::MultiLabel(train.n_labels));
        probe.epochs = 4;
        probe.warmup_epochs = 1;
        let ft = ProbeConfig {
            mode: ProbeMode::FineTune,
            encoder_lr: 0.0,
            ..probe
        };
        let a = run_probe(&enc, &train, &val, &probe).unwrap();
        let b = run_probe(&enc, &train, &val, &ft).unwrap();
        assert_eq!(a.head.checksum(), b.head.checksum());
        assert_eq!(a.encoder.params.checksum(), b.encoder.params.checksum());
        assert_eq!(a.trace, b.trace);
        assert_eq!(format!("{}", a.report), format!("{}", b.report));
    }
}

#[test]
fn finetune_updates_the_selected_depth() {
    let enc = spatial_encoder(6, 6);
    let set = labeled(8, 6);
    let mut cfg = ProbeConfig::finetune(HeadKind::Regression(2));
    cfg.encoder_lr = 1e-3;
    cfg.epochs = 2;
    cfg.depth = FinetuneDepth::LastBlock;
    let out = run_probe(&enc, &set, &set, &cfg).unwrap();
    for (name, t) in out.encoder.params.iter() {
        let same = t.data() == enc.params.require(name).unwrap().data();
        assert_eq!(same, !name.starts_with("blocks.1."), "{name}");
    }
    cfg.depth = FinetuneDepth::All;
    let out = run_probe(&enc, &set, &set, &cfg).unwrap();
    assert_ne!(out.encoder.params.require("embed.w").unwrap(), enc.params.require("embed.w").unwrap());
}

#[test]
fn band_mismatch_is_a_checkpoint_error() {
    let enc = spatial_encoder(4, 0);
    let set = labeled(4, 0);
    let cfg = ProbeConfig::probe(HeadKind::Regression(2));
    assert!(matches!(run_probe(&enc, &set, &set, &cfg), Err(Error::Checkpoint(_))));
}

#[test]
fn label_subsets_are_nested_and_cover_classes() {
    let set = labeled(60, 7);
    let fractions = [0.05, 0.25, 0.5, 1.0];
    let (subsets, _) = nested_stratified_subsets(&set, &fractions, 11).unwrap();
    assert_eq!(subsets.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 15, 30, 60]);
    for pair in subsets.windows(2) {
        assert_eq!(&pair[1][..pair[0].len()], &pair[0][..]);
    }
    for class in 0..set.n_labels {
        let anywhere = (0..set.len()).any(|i| set.label_row(i)[class] == 1);
        for s in &subsets {
            assert_eq!(s.iter().any(|&i| set.label_row(i)[class] == 1), anywhere);
        }
    }
    let (again, _) = nested_stratified_subsets(&set, &fractions, 11).unwrap();
    assert_eq!(subsets, again);
    assert!(nested_stratified_subsets(&set, &[0.0], 1).is_err());
}

#[test]
fn fraction_study_rows() {
    let ssl = spatial_encoder(6, 8);
    let random = spatial_encoder(6, 9);
    let train = labeled(20, 8);
    let val = labeled(6, 9);
    let mut cfg = ProbeConfig::probe(HeadKind::MultiLabel(train.n_labels));
    cfg.epochs = 2;
    let fractions = [0.05, 0.25, 0.5, 1.0];
    let (rows, _) = label_fraction_study(&[("ssl", &ssl), ("random", &random)], &train, &val, &fractions, &cfg).unwrap();
    assert_eq!(rows.len(), 8);
    let csv = fraction_csv(&rows);
    assert!(csv.starts_with("fraction,init,metric,value\n"));
    assert!(csv.contains("\n0.05,ssl,f1_macro,"));
}
