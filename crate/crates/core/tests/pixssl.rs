use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specssl::autodiff::Tape;
use specssl::data::{generate_synthetic, profiles_of, SpectralBatch, SynthConfig};
use specssl::pixssl::{
    masked_count, masked_mse, reconstruction_loss, sample_group_mask, sample_mask, sweep_csv, LossMode, MaskPlan,
    PixConfig, PixModel, PixTrainer, SweepRow,
};
use specssl::schedule::scaled_lr;
use specssl::transformer::{EncoderConfig, TokenKind};
use specssl::{Error, Tensor};

fn tiny_config(channels: usize) -> PixConfig {
    let mut cfg = PixConfig::desk(channels);
    cfg.encoder = EncoderConfig {
        embed_dim: 16,
        num_heads: 2,
        mlp_hidden: 32,
        num_blocks: 2,
        token_kind: TokenKind::SpectralBand { group_size: 5, channels },
        max_tokens: 64,
    };
    cfg.decoder_dim = 8;
    cfg.decoder_heads = 2;
    cfg.decoder_mlp = 16;
    cfg.decoder_blocks = 1;
    cfg.batch_size = 32;
    cfg.epochs = 10;
    cfg.warmup_epochs = 1;
    cfg
}

fn synthetic_profiles(n_cubes: usize, channels: usize, seed: u64) -> SpectralBatch {
    let data = generate_synthetic(&SynthConfig {
        n_cubes,
        height: 12,
        width: 12,
        channels,
        n_endmembers: 4,
        scene_cols: 2,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let cubes: Vec<_> = data.cubes.iter().map(|c| c.cube.clone()).collect();
    profiles_of(&cubes, 3).unwrap()
}

fn random_profiles(n: usize, c: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn half_of_150_bands_masked() {
    let plan = sample_mask(150, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((plan.masked.len(), plan.visible.len()), (75, 75));
    assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
    assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
    let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..150).collect::<Vec<_>>());
}

#[test]
fn degenerate_ratios_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for r in [0.0, 1.0, -0.1, 0.01, 0.99] {
        assert!(matches!(sample_mask(10, r, &mut rng), Err(Error::Parameter(_))), "ratio {r}");
    }
    assert_eq!(masked_count(30, 0.5).unwrap(), 15);
}

#[test]
fn mask_is_uniform_over_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut hits = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        for i in sample_mask(10, 0.5, &mut rng).unwrap().masked {
            hits[i] += 1;
        }
    }
    for h in hits {
        let share = h as f64 / draws as f64;
        assert!((share - 0.5).abs() < 0.02, "share {share}");
    }
}

#[test]
fn group_plan_expands_to_bands() {
    let plan = MaskPlan::from_masked(4, 5, vec![2, 0]).unwrap();
    assert_eq!(plan.masked, vec![0, 2]);
    assert_eq!(plan.visible, vec![1, 3]);
    assert_eq!(plan.masked_bands(), vec![0, 1, 2, 3, 4, 10, 11, 12, 13, 14]);
}

#[test]
fn encoder_sees_only_visible_groups() {
    let cfg = PixConfig::new(150);
    let model = PixModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let plan = sample_group_mask(30, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let profiles = random_profiles(2, 150, 3);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let latents = model.encode_visible(&mut tape, &bound, &profiles, 2, &plan).unwrap();
    assert_eq!(tape.shape(latents), &[2, 15, cfg.encoder.embed_dim]);
}

#[test]
fn garbage_in_masked_bands_leaves_latents_unchanged() {
    let cfg = tiny_config(50);
    let model = PixModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let plan = sample_group_mask(10, 5, 0.5, &mut rng).unwrap();
        let clean = random_profiles(3, 50, rng.random());
        let mut dirty = clean.clone();
        for b in 0..3 {
            for band in plan.masked_bands() {
                dirty[b * 50 + band] = rng.random_range(-1e6..1e6);
            }
        }
        let run = |p: &[f32]| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, false);
            let z = model.encode_visible(&mut tape, &bound, p, 3, &plan).unwrap();
            tape.value(z).to_vec()
        };
        let (a, b) = (run(&clean), run(&dirty));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn decoder_output_shape_and_zero_weights() {
    let cfg = tiny_config(50);
    let mut model = PixModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let plan = sample_group_mask(10, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let profiles = random_profiles(4, 50, 2);
    assert_eq!(model.reconstruct(&profiles, 4, &plan).unwrap().shape(), &[4, 50]);
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("decoder.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let out = model.reconstruct(&profiles, 4, &plan).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_reacts_to_visible_inputs_and_shares_the_mask_token() {
    let cfg = tiny_config(50);
    let model = PixModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(model.params.require("decoder.mask_token").unwrap().shape(), &[cfg.decoder_dim]);
    let plan = MaskPlan::from_masked(10, 5, vec![1, 4, 7]).unwrap();
    let a = random_profiles(1, 50, 5);
    let mut b = a.clone();
    b[0] += 1.0;
    let ra = model.reconstruct(&a, 1, &plan).unwrap();
    let rb = model.reconstruct(&b, 1, &plan).unwrap();
    assert!(ra.data()[..5].iter().zip(&rb.data()[..5]).any(|(x, y)| x != y));
}

#[test]
fn plan_mismatch_is_a_contract_error() {
    let cfg = tiny_config(50);
    let model = PixModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let plan = MaskPlan::from_masked(12, 5, vec![0]).unwrap();
    let err = model.reconstruct(&random_profiles(1, 60, 0), 1, &plan).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn decoder_must_be_shallower_than_encoder() {
    let mut cfg = tiny_config(50);
    cfg.decoder_blocks = cfg.encoder.num_blocks;
    assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
}

fn loss_of(pred: Vec<f32>, target: Vec<f32>, plan: &MaskPlan, mode: LossMode) -> f32 {
    let c = plan.channels();
    let b = pred.len() / c;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![b, c], pred).unwrap());
    let t = Tensor::new(vec![b, c], target).unwrap();
    let l = reconstruction_loss(&mut tape, p, &t, plan, mode).unwrap();
    tape.scalar(l)
}

#[test]
fn reconstruction_loss_examples() {
    let plan = MaskPlan::from_masked(4, 1, vec![1, 3]).unwrap();
    let target = vec![1.0, 2.0, 3.0, 4.0];
    assert_eq!(loss_of(target.clone(), target.clone(), &plan, LossMode::MaskedOnly), 0.0);
    let plus: Vec<f32> = target.iter().map(|v| v + 1.0).collect();
    assert_eq!(loss_of(plus.clone(), target.clone(), &plan, LossMode::MaskedOnly), 1.0);
    assert_eq!(loss_of(plus, target.clone(), &plan, LossMode::AllBands), 1.0);
    let pred = vec![1.0, 2.5, 3.0, 3.5];
    assert_eq!(loss_of(pred.clone(), target.clone(), &plan, LossMode::MaskedOnly), 0.25);
    assert_eq!(masked_mse(&pred, &target, &plan, LossMode::MaskedOnly), 0.25);
    let mut visible_noise = pred;
    visible_noise[0] = 50.0;
    visible_noise[2] = -7.0;
    assert_eq!(loss_of(visible_noise, target, &plan, LossMode::MaskedOnly), 0.25);
}

#[test]
fn linear_batch_scaling() {
    assert!((scaled_lr(1e-4, 512) - 2e-4).abs() < 1e-18);
}

#[test]
fn loss_drops_within_ten_epochs() {
    let profiles = synthetic_profiles(8, 50, 0);
    let mut trainer = PixTrainer::new(tiny_config(50), &profiles).unwrap();
    let first = trainer.run_epoch().unwrap().loss;
    let mut last = first;
    while !trainer.is_done() {
        last = trainer.run_epoch().unwrap().loss;
    }
    assert!(last < first, "epoch 1 {first}, epoch 10 {last}");
}

#[test]
fn resume_matches_straight_run() {
    let profiles = synthetic_profiles(4, 50, 1);
    let mut cfg = tiny_config(50);
    cfg.epochs = 4;
    let mut straight = PixTrainer::new(cfg, &profiles).unwrap();
    let mut trace = Vec::new();
    while !straight.is_done() {
        trace.push(straight.run_epoch().unwrap());
    }
    let mut first = PixTrainer::new(cfg, &profiles).unwrap();
    let mut resumed_trace = vec![first.run_epoch().unwrap(), first.run_epoch().unwrap()];
    let bytes = first.to_checkpoint().unwrap().to_bytes();
    let ck = specssl::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    let mut second = PixTrainer::from_checkpoint(&ck, &profiles).unwrap();
    while !second.is_done() {
        resumed_trace.push(second.run_epoch().unwrap());
    }
    assert_eq!(trace, resumed_trace);
    assert_eq!(
        straight.to_checkpoint().unwrap().to_bytes(),
        second.to_checkpoint().unwrap().to_bytes()
    );
}

#[test]
fn encoder_export_keeps_input_statistics() {
    let profiles = synthetic_profiles(2, 50, 2);
    let mut cfg = tiny_config(50);
    cfg.epochs = 1;
    let mut trainer = PixTrainer::new(cfg, &profiles).unwrap();
    trainer.run_epoch().unwrap();
    let enc = trainer.model.encoder().unwrap();
    let back = specssl::transformer::EncoderState::from_checkpoint(&enc.to_checkpoint().unwrap()).unwrap();
    assert_eq!(back, enc);
    assert_ne!(enc.input_stats.mean, vec![0.0; 50]);
}

#[test]
fn sweep_csv_has_one_row_per_ratio() {
    let rows: Vec<SweepRow> = [0.1, 0.3, 0.5, 0.7]
        .iter()
        .map(|&ratio| SweepRow {
            ratio,
            metric: "r2",
            value: ratio,
            report: specssl::metrics::MetricsReport::regression(specssl::metrics::RegressionMetrics {
                r2: ratio,
                rmse: 0.0,
            }),
        })
        .collect();
    let csv = sweep_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "ratio,probe_metric,probe_value");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[3], "0.5,r2,0.5");
}
