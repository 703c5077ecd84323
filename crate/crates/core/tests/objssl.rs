use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specssl::augment::make_viewset;
use specssl::checkpoint::Checkpoint;
use specssl::data::{generate_synthetic, SpectralCube, SynthConfig};
use specssl::objssl::{
    distill_pairs, momentum_update, teacher_probs, update_center, DistillState, ObjConfig, ObjTrainer,
};
use specssl::{Error, ParamSet, Tape, Tensor};

fn cubes(n: usize, channels: usize) -> Vec<SpectralCube> {
    let cfg = SynthConfig {
        n_cubes: n,
        height: 24,
        width: 24,
        channels,
        n_endmembers: 4,
        scene_cols: 4,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg).unwrap().cubes.into_iter().map(|c| c.cube).collect()
}

fn small_config() -> ObjConfig {
    let mut cfg = ObjConfig::desk(8);
    cfg.head.hidden = 32;
    cfg.head.prototypes = 16;
    cfg.head.bottleneck = 8;
    cfg.batch_size = 4;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.probe_size = 4;
    cfg
}

fn entropy(p: &[f32]) -> f64 {
    -p.iter().map(|&v| v as f64 * (v as f64).ln()).sum::<f64>()
}

#[test]
fn teacher_probs_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = Tensor::randn(&[5, 7], 1.0, &mut rng);
    let p = teacher_probs(&logits, &[0.0; 7], 0.04).unwrap();
    for row in p.data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let hot = teacher_probs(&logits, &[0.0; 7], 1e6).unwrap();
    assert!(hot.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-4));
}

#[test]
fn centering_on_current_logits_gives_uniform() {
    let logits = Tensor::new(vec![1, 4], vec![0.3, -0.9, 0.5, 0.1]).unwrap();
    let p = teacher_probs(&logits, logits.data(), 0.04).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.25));
}

#[test]
fn self_distillation_attains_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let p = teacher_probs(&logits, &[0.0; 6], 0.1).unwrap();
    let mut tape = Tape::new();
    let s = tape.leaf(&logits);
    let loss = distill_pairs(&mut tape, &[p.clone()], &[s], &[None], 0.1).unwrap();
    let expected: f64 = p.data().chunks(6).map(entropy).sum::<f64>() / 3.0;
    assert!((tape.scalar(loss) as f64 - expected).abs() < 1e-5);
}

#[test]
fn two_view_hand_case() {
    // Teacher p = (0.2, 0.3, 0.5); student logits (1, 0, -1) at tau 0.5.
    let p = Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap();
    let z = [1.0f64, 0.0, -1.0];
    let norm: f64 = z.iter().map(|v| (v / 0.5).exp()).sum();
    let q: Vec<f64> = z.iter().map(|v| (v / 0.5).exp() / norm).collect();
    let manual = -(0.2 * q[0].ln() + 0.3 * q[1].ln() + 0.5 * q[2].ln());

    let mut tape = Tape::new();
    let same = tape.leaf(&Tensor::new(vec![1, 3], vec![5.0, 5.0, -5.0]).unwrap());
    let other = tape.leaf(&Tensor::new(vec![1, 3], z.iter().map(|&v| v as f32).collect()).unwrap());
    // The student copy of the teacher's own view is skipped.
    let loss = distill_pairs(&mut tape, &[p], &[same, other], &[Some(0), None], 0.5).unwrap();
    assert!((tape.scalar(loss) as f64 - manual).abs() < 1e-5);
}

#[test]
fn loss_is_never_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let p = teacher_probs(&Tensor::randn(&[2, 5], 2.0, &mut rng), &[0.0; 5], 0.04).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::randn(&[2, 5], 2.0, &mut rng));
        let loss = distill_pairs(&mut tape, &[p], &[s], &[None], 0.1).unwrap();
        assert!(tape.scalar(loss) >= 0.0);
    }
}

#[test]
fn pairing_errors() {
    let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let mut tape = Tape::new();
    let s = tape.leaf(&Tensor::zeros(&[1, 2]));
    assert!(matches!(distill_pairs(&mut tape, &[], &[s], &[None], 0.1), Err(Error::Contract(_))));
    assert!(matches!(
        distill_pairs(&mut tape, &[p], &[s], &[Some(0)], 0.1),
        Err(Error::Contract(_))
    ));
}

fn single(v: f32) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
    p
}

#[test]
fn momentum_update_cases() {
    let mut t = single(1.0);
    momentum_update(&mut t, &single(0.0), 1.0).unwrap();
    assert_eq!(t.require("w").unwrap().data(), &[1.0]);
    momentum_update(&mut t, &single(0.0), 0.96).unwrap();
    assert!((t.require("w").unwrap().data()[0] - 0.96).abs() < 1e-6);
}

#[test]
fn momentum_update_is_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let a = Tensor::randn(&[16], 3.0, &mut rng);
        let b = Tensor::randn(&[16], 3.0, &mut rng);
        let (mut t, mut s) = (ParamSet::new(), ParamSet::new());
        t.insert("w", a.clone()).unwrap();
        s.insert("w", b.clone()).unwrap();
        momentum_update(&mut t, &s, rng.random_range(0.96..=1.0)).unwrap();
        for ((&new, &old), &stu) in t.require("w").unwrap().data().iter().zip(a.data()).zip(b.data()) {
            assert!(new >= old.min(stu) && new <= old.max(stu));
        }
    }
}

#[test]
fn center_ema() {
    let mut c = vec![0.5f32, -1.0];
    update_center(&mut c, &Tensor::new(vec![1, 2], vec![9.0, 9.0]).unwrap(), 1.0).unwrap();
    assert_eq!(c, vec![0.5, -1.0]);

    let mut c = vec![0.0f32];
    update_center(&mut c, &Tensor::new(vec![2, 1], vec![0.5, 1.5]).unwrap(), 0.9).unwrap();
    assert!((c[0] - 0.1).abs() < 1e-7);
    update_center(&mut c, &Tensor::new(vec![1, 1], vec![2.0]).unwrap(), 0.9).unwrap();
    assert!((c[0] - 0.29).abs() < 1e-6);

    for _ in 0..400 {
        update_center(&mut c, &Tensor::new(vec![1, 1], vec![3.0]).unwrap(), 0.9).unwrap();
    }
    assert!((c[0] - 3.0).abs() < 1e-5);
}

#[test]
fn momentum_schedule_spans_096_to_1() {
    let cfg = small_config();
    let state = DistillState::new(cfg, 40, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((state.lambda.at(0).unwrap() - 0.96).abs() < 1e-12);
    assert!((state.lambda.at(39).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn config_rejects_bad_temperatures_and_round_trips() {
    let mut cfg = small_config();
    cfg.tau_t = 0.2;
    assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    let cfg = small_config();
    let mut kv = specssl::KeyValues::new();
    cfg.write_kv(&mut kv);
    assert_eq!(ObjConfig::from_kv(&kv).unwrap(), cfg);
}

#[test]
fn teacher_gets_no_gradient_and_local_order_does_not_matter() {
    let cfg = small_config();
    let data = cubes(2, 8);
    let state = DistillState::new(cfg, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sets: Vec<_> = data.iter().map(|c| make_viewset(c, &cfg.views, &mut rng).unwrap()).collect();

    let mut tape = Tape::new();
    let teacher_bound = state.teacher.bind(&mut tape, false);
    let bound = state.student.bind(&mut tape, true);
    let out = state.distill_loss(&mut tape, &bound, &sets).unwrap();
    let grads = tape.backward(out.loss).unwrap();
    assert!(teacher_bound.vars().iter().all(|&v| grads.get(v).is_none()));
    assert!(bound.vars().iter().any(|&v| grads.get(v).is_some_and(|g| g.iter().any(|&x| x != 0.0))));

    let mut shuffled = sets.clone();
    for s in &mut shuffled {
        s.local_views.reverse();
    }
    let mut tape2 = Tape::new();
    let bound2 = state.student.bind(&mut tape2, true);
    let out2 = state.distill_loss(&mut tape2, &bound2, &shuffled).unwrap();
    let (a, b) = (tape.scalar(out.loss), tape2.scalar(out2.loss));
    assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn empty_inputs_are_contract_errors() {
    let cfg = small_config();
    let state = DistillState::new(cfg, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let bound = state.student.bind(&mut tape, true);
    assert!(matches!(state.distill_loss(&mut tape, &bound, &[]), Err(Error::Contract(_))));
    assert!(matches!(ObjTrainer::new(cfg, &[]), Err(Error::Contract(_))));
}

#[test]
fn teacher_moves_only_through_momentum() {
    let mut cfg = small_config();
    cfg.lambda_start = 1.0;
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    let data = cubes(4, 8);
    let mut trainer = ObjTrainer::new(cfg, &data).unwrap();
    let (student0, teacher0) = (trainer.state.student.checksum(), trainer.state.teacher.checksum());
    trainer.run_epoch().unwrap();
    assert_ne!(trainer.state.student.checksum(), student0);
    assert_eq!(trainer.state.teacher.checksum(), teacher0);
}

#[test]
fn constant_input_does_not_collapse_to_one_hot() {
    let mut cfg = small_config();
    cfg.epochs = 100;
    cfg.batch_size = 1;
    cfg.probe_size = 2;
    let constant = vec![SpectralCube::new(24, 24, 8, vec![0.4; 24 * 24 * 8]).unwrap().with_id("flat", "g")];
    let mut trainer = ObjTrainer::new(cfg, &constant).unwrap();
    while !trainer.is_done() {
        trainer.run_epoch().unwrap();
    }
    assert_eq!(trainer.step, 100);
    let view = trainer.state.input_stats.normalize_cube(&constant[0]).unwrap();
    let mut tape = Tape::new();
    let bound = trainer.state.student.bind(&mut tape, false);
    let logits = trainer.state.network_forward(&mut tape, &bound, &[&view]).unwrap();
    let probs = tape.softmax(logits, 1, cfg.tau_s).unwrap();
    let max = tape.value(probs).iter().cloned().fold(0.0, f32::max);
    assert!(max < 0.99, "student max probability {max}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = small_config();
    let data = cubes(6, 8);
    let mut straight = ObjTrainer::new(cfg, &data).unwrap();
    let mut trace = Vec::new();
    while !straight.is_done() {
        trace.push(straight.run_epoch().unwrap());
    }

    let mut first = ObjTrainer::new(cfg, &data).unwrap();
    let mut resumed_trace = vec![first.run_epoch().unwrap()];
    let bytes = first.to_checkpoint().unwrap().to_bytes();
    let mut resumed = ObjTrainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &data).unwrap();
    while !resumed.is_done() {
        resumed_trace.push(resumed.run_epoch().unwrap());
    }
    assert_eq!(trace, resumed_trace);
    assert_eq!(straight.state, resumed.state);
    assert_eq!(straight.to_checkpoint().unwrap().to_bytes(), resumed.to_checkpoint().unwrap().to_bytes());
}

#[test]
fn student_encoder_carries_input_statistics() {
    let cfg = small_config();
    let data = cubes(4, 8);
    let trainer = ObjTrainer::new(cfg, &data).unwrap();
    let enc = trainer.state.student_encoder().unwrap();
    let back = specssl::transformer::EncoderState::from_checkpoint(&enc.to_checkpoint().unwrap()).unwrap();
    assert_eq!(back, enc);
    assert!(enc.input_stats.std.iter().all(|&s| s > 0.0 && s != 1.0));
}
