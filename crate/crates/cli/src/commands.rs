//! Command implementations. Each one resolves its configuration, writes the
//! resolved record next to its outputs, then runs the library pipeline.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specssl::checkpoint::Checkpoint;
use specssl::data::{self, load_dataset, profiles_of, read_cube, Manifest, SpectralCube, Split, SynthConfig};
use specssl::downstream::{
    nested_stratified_subsets, predict, run_probe, FinetuneDepth, HeadKind, LabeledSet, ProbeConfig, ProbeMode,
};
use specssl::metrics::{per_class_csv, score_csv, MetricsReport, MultiLabelEval};
use specssl::objssl::{ObjConfig, ObjEpochRecord, ObjTrainer};
use specssl::pixssl::{masking_ratio_sweep, PixConfig, PixEpochRecord, PixTrainer};
use specssl::transformer::{summary_attention_grid, EncoderState, TokenBatch};
use specssl::{KeyValues, ParamSet, Tensor};

use crate::config::{load_file, resolve, write_text, Layout, Overrides};
use crate::error::{io, usage, Result};
use crate::{Depth, ExportArgs, GenDataArgs, Global, HeadTask, Preset, PretrainArgs, ProbeArgs};
use crate::{ScoreArgs, SweepArgs, Task};

const DEFAULT_CHECKPOINT_EVERY: usize = 10;
const SWEEP_HEADER: &str = "ratio,metric,value";

fn run_keys(global: &Global, kv: &mut KeyValues) {
    if global.threads > 1 {
        log::warn!("--threads {} requested; computation is single-threaded", global.threads);
    }
    kv.set("run.threads", global.threads);
}

fn resolved(global: &Global, defaults: &KeyValues, flags: &Overrides) -> Result<KeyValues> {
    let file = load_file(global.config.as_deref())?;
    Ok(resolve(defaults, &file, flags))
}

/// Desk-scale dataset defaults; `--height 120 --width 120 --channels 150`
/// gives full-size cubes.
fn synth_defaults() -> SynthConfig {
    SynthConfig {
        height: 24,
        width: 24,
        channels: 50,
        ..SynthConfig::default()
    }
}

pub fn gen_data(global: &Global, a: GenDataArgs) -> Result<()> {
    let d = synth_defaults();
    let mut defaults = KeyValues::new();
    defaults.set("data.cubes", d.n_cubes);
    defaults.set("data.height", d.height);
    defaults.set("data.width", d.width);
    defaults.set("data.channels", d.channels);
    defaults.set("data.endmembers", d.n_endmembers);
    defaults.set("data.targets", d.n_targets);
    defaults.set("data.noise_sigma", d.noise_sigma);
    defaults.set("data.label_threshold", d.label_threshold);
    defaults.set("data.blobs", d.blobs);
    defaults.set("data.scene_cols", d.scene_cols);
    defaults.set("data.val_fraction", 0.2);
    defaults.set("data.seed", d.seed);
    run_keys(global, &mut defaults);

    let mut flags = Overrides::default();
    flags
        .set("data.cubes", a.cubes)
        .set("data.height", a.height)
        .set("data.width", a.width)
        .set("data.channels", a.channels)
        .set("data.endmembers", a.endmembers)
        .set("data.targets", a.targets)
        .set("data.noise_sigma", a.noise_sigma)
        .set("data.label_threshold", a.label_threshold)
        .set("data.blobs", a.blobs)
        .set("data.scene_cols", a.scene_cols)
        .set("data.val_fraction", a.val_fraction)
        .set("data.seed", a.seed);
    let kv = resolved(global, &defaults, &flags)?;
    let cfg = SynthConfig {
        n_cubes: kv.parse_value("data.cubes")?,
        height: kv.parse_value("data.height")?,
        width: kv.parse_value("data.width")?,
        channels: kv.parse_value("data.channels")?,
        n_endmembers: kv.parse_value("data.endmembers")?,
        n_targets: kv.parse_value("data.targets")?,
        noise_sigma: kv.parse_value("data.noise_sigma")?,
        label_threshold: kv.parse_value("data.label_threshold")?,
        blobs: kv.parse_value("data.blobs")?,
        scene_cols: kv.parse_value("data.scene_cols")?,
        seed: kv.parse_value("data.seed")?,
    };
    cfg.validate()?;
    let val_fraction: f64 = kv.parse_value("data.val_fraction")?;

    let dataset = data::generate_synthetic(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let manifest = data::write_dataset(&global.out, &dataset, val_fraction, &mut rng)?;
    fs::create_dir_all(&global.out).map_err(|e| io(&global.out, e))?;
    write_text(&global.out.join("gen-data.cfg"), &kv.to_string())?;

    let count = |s| manifest.split(s).count();
    let groups = |s| {
        let mut g: Vec<&str> = manifest.split(s).map(|e| e.geo_group.as_str()).collect();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    println!(
        "wrote {} cubes of {}x{}x{} to {}",
        cfg.n_cubes,
        cfg.height,
        cfg.width,
        cfg.channels,
        global.out.display()
    );
    println!(
        "train {} cubes in {} groups, val {} cubes in {} groups; {} labels, {} targets",
        count(Split::Train),
        groups(Split::Train),
        count(Split::Val),
        groups(Split::Val),
        manifest.n_labels(),
        manifest.n_targets()
    );
    Ok(())
}

fn split_cubes(manifest: &Manifest, cubes: &[SpectralCube], split: Split) -> Vec<SpectralCube> {
    manifest
        .entries
        .iter()
        .zip(cubes)
        .filter(|(e, _)| e.split == split)
        .map(|(_, c)| c.clone())
        .collect()
}

fn labeled(manifest: &Manifest, cubes: &[SpectralCube], split: Split) -> Result<LabeledSet> {
    let (mut set, mut labels, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for (e, c) in manifest.entries.iter().zip(cubes) {
        if e.split == split {
            set.push(c.clone());
            labels.extend_from_slice(&e.labels);
            targets.extend_from_slice(&e.targets);
        }
    }
    if set.is_empty() {
        return Err(usage(format!("dataset has no {split} cubes")));
    }
    Ok(LabeledSet::new(set, manifest.n_labels(), labels, manifest.n_targets(), targets)?)
}

fn channels_of(cubes: &[SpectralCube]) -> Result<usize> {
    cubes
        .first()
        .map(|c| c.channels())
        .ok_or_else(|| usage("dataset has no training cubes"))
}

/// Keeps the header and the first `epochs` rows of an existing trace.
fn truncated_trace(path: &Path, header: &str, epochs: usize) -> Result<String> {
    let mut out = format!("{header}\n");
    if epochs == 0 {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let rows: Vec<&str> = text.lines().skip(1).take(epochs).collect();
    if rows.len() < epochs {
        log::warn!("{} has {} of {epochs} epochs; continuing with what is there", path.display(), rows.len());
    }
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    Ok(out)
}

fn append(path: &Path, row: &str, trace: &mut String) -> Result<()> {
    trace.push_str(row);
    trace.push('\n');
    write_text(path, trace)
}

/// The two trainers behind one interface.
enum Trainer {
    Obj(Box<ObjTrainer>),
    Pix(Box<PixTrainer>),
}

impl Trainer {
    fn epoch(&self) -> usize {
        match self {
            Trainer::Obj(t) => t.epoch,
            Trainer::Pix(t) => t.epoch,
        }
    }

    fn epochs(&self) -> usize {
        match self {
            Trainer::Obj(t) => t.state.config.epochs,
            Trainer::Pix(t) => t.model.config.epochs,
        }
    }

    fn is_done(&self) -> bool {
        self.epoch() >= self.epochs()
    }

    /// Runs one epoch; returns the trace row and the progress line.
    fn run_epoch(&mut self) -> Result<(String, String)> {
        let total = self.epochs();
        Ok(match self {
            Trainer::Obj(t) => {
                let r = t.run_epoch()?;
                let line = format!(
                    "epoch {}/{total} loss {:.6} spread {:.4e} lr {:.3e} lambda {:.6} teacher_max {:.4}",
                    r.epoch + 1,
                    r.loss,
                    r.spread,
                    r.lr,
                    r.lambda,
                    r.teacher_marginal_max
                );
                (r.csv_row(), line)
            }
            Trainer::Pix(t) => {
                let r = t.run_epoch()?;
                let line = format!("epoch {}/{total} loss {:.6} lr {:.3e}", r.epoch + 1, r.loss, r.lr);
                (r.csv_row(), line)
            }
        })
    }

    fn state(&self) -> Result<Checkpoint> {
        Ok(match self {
            Trainer::Obj(t) => t.to_checkpoint()?,
            Trainer::Pix(t) => t.to_checkpoint()?,
        })
    }

    fn encoder(&self) -> Result<EncoderState> {
        Ok(match self {
            Trainer::Obj(t) => t.state.student_encoder()?,
            Trainer::Pix(t) => t.model.encoder()?,
        })
    }
}

fn pix_defaults(preset: Preset, channels: usize) -> PixConfig {
    match preset {
        Preset::Desk => PixConfig::desk(channels),
        Preset::Full => PixConfig::new(channels),
    }
}

pub fn pretrain(global: &Global, a: PretrainArgs) -> Result<()> {
    let task_name = match a.task {
        Task::Obj => "obj",
        Task::Pix => "pix",
    };
    let misplaced: &[(&str, bool)] = match a.task {
        Task::Obj => &[("--mask-ratio", a.mask_ratio.is_some()), ("--stride", a.stride.is_some())],
        Task::Pix => &[("--tau-t", a.tau_t.is_some()), ("--tau-s", a.tau_s.is_some())],
    };
    if let Some((flag, _)) = misplaced.iter().find(|f| f.1) {
        return Err(usage(format!("{flag} does not apply to --task {task_name}")));
    }

    let (manifest, cubes) = load_dataset(&a.data)?;
    let train = split_cubes(&manifest, &cubes, Split::Train);
    let channels = channels_of(&train)?;
    let preset = a.preset.unwrap_or(Preset::Desk);

    let mut defaults = KeyValues::new();
    match (a.task, preset) {
        (Task::Obj, Preset::Desk) => ObjConfig::desk(channels).write_kv(&mut defaults),
        (Task::Obj, Preset::Full) => ObjConfig::new(channels).write_kv(&mut defaults),
        (Task::Pix, p) => pix_defaults(p, channels).write_kv(&mut defaults),
    }
    defaults.set("run.task", task_name);
    defaults.set("run.preset", format!("{preset:?}").to_lowercase());
    defaults.set("run.data", a.data.display());
    defaults.set("run.checkpoint_every", DEFAULT_CHECKPOINT_EVERY);
    run_keys(global, &mut defaults);

    let mut flags = Overrides::default();
    let lr_key = if a.task == Task::Obj { "obj.lr" } else { "pix.base_lr" };
    flags
        .set(&format!("{task_name}.epochs"), a.epochs)
        .set(&format!("{task_name}.batch_size"), a.batch_size)
        .set(&format!("{task_name}.seed"), a.seed)
        .set(lr_key, a.lr)
        .set("obj.tau_t", a.tau_t)
        .set("obj.tau_s", a.tau_s)
        .set("pix.mask_ratio", a.mask_ratio)
        .set("pix.stride", a.stride)
        .set("run.checkpoint_every", a.checkpoint_every);
    let kv = resolved(global, &defaults, &flags)?;
    let every: usize = kv.parse_value("run.checkpoint_every")?;

    let layout = Layout::create(&global.out)?;
    let state_path = layout.checkpoints.join(format!("{task_name}_state.ckpt"));
    let encoder_path = layout.checkpoints.join(format!("{task_name}_encoder.ckpt"));
    let trace_path = layout.traces.join(format!("{task_name}_loss.csv"));
    let header = match a.task {
        Task::Obj => ObjEpochRecord::CSV_HEADER,
        Task::Pix => PixEpochRecord::CSV_HEADER,
    };

    let mut trainer = match a.task {
        Task::Obj => {
            let cfg = ObjConfig::from_kv(&kv)?;
            if a.resume {
                let ck = Checkpoint::load(&state_path)?;
                let saved = ObjConfig::from_kv(&ck.header)?;
                if saved != cfg {
                    return Err(usage("resolved config differs from the checkpointed run"));
                }
                Trainer::Obj(Box::new(ObjTrainer::from_checkpoint(&ck, &train)?))
            } else {
                Trainer::Obj(Box::new(ObjTrainer::new(cfg, &train)?))
            }
        }
        Task::Pix => {
            let cfg = PixConfig::from_kv(&kv)?;
            let profiles = profiles_of(&train, cfg.stride)?;
            if a.resume {
                let ck = Checkpoint::load(&state_path)?;
                let saved = PixConfig::from_kv(&ck.header)?;
                if saved != cfg {
                    return Err(usage("resolved config differs from the checkpointed run"));
                }
                Trainer::Pix(Box::new(PixTrainer::from_checkpoint(&ck, &profiles)?))
            } else {
                Trainer::Pix(Box::new(PixTrainer::new(cfg, &profiles)?))
            }
        }
    };
    layout.write_config(&format!("pretrain_{task_name}"), &kv)?;

    let mut trace = if a.resume {
        log::info!("resuming {task_name} pretraining at epoch {}", trainer.epoch());
        truncated_trace(&trace_path, header, trainer.epoch())?
    } else {
        format!("{header}\n")
    };
    write_text(&trace_path, &trace)?;
    while !trainer.is_done() {
        let (row, line) = trainer.run_epoch()?;
        append(&trace_path, &row, &mut trace)?;
        println!("{line}");
        if every > 0 && trainer.epoch() % every == 0 && !trainer.is_done() {
            trainer.state()?.save(&state_path)?;
        }
    }
    trainer.state()?.save(&state_path)?;
    trainer.encoder()?.to_checkpoint()?.save(&encoder_path)?;
    println!("encoder written to {}", encoder_path.display());
    Ok(())
}

fn head_kind(task: HeadTask, manifest: &Manifest) -> HeadKind {
    match task {
        HeadTask::Multilabel => HeadKind::MultiLabel(manifest.n_labels()),
        HeadTask::Regression => HeadKind::Regression(manifest.n_targets()),
    }
}

fn parse_task(s: &str) -> Result<HeadTask> {
    match s {
        "multilabel" => Ok(HeadTask::Multilabel),
        "regression" => Ok(HeadTask::Regression),
        other => Err(usage(format!("unknown probe task {other:?} (multilabel|regression)"))),
    }
}

fn task_str(t: HeadTask) -> &'static str {
    match t {
        HeadTask::Multilabel => "multilabel",
        HeadTask::Regression => "regression",
    }
}

fn probe_defaults(config: &ProbeConfig, kv: &mut KeyValues) {
    kv.set("probe.epochs", config.epochs);
    kv.set("probe.batch_size", config.batch_size);
    kv.set("probe.head_lr", config.head_lr);
    kv.set("probe.head_min_lr", config.head_min_lr);
    kv.set("probe.warmup_epochs", config.warmup_epochs);
    kv.set("probe.weight_decay", config.weight_decay);
    kv.set("probe.threshold", config.threshold);
    kv.set("probe.stride", config.profile_stride);
    kv.set("probe.seed", config.seed);
    if config.mode == ProbeMode::FineTune {
        kv.set("probe.encoder_lr", config.encoder_lr);
        kv.set("probe.depth", config.depth);
    }
}

fn probe_from_kv(kv: &KeyValues, base: ProbeConfig) -> Result<ProbeConfig> {
    let mut c = ProbeConfig {
        epochs: kv.parse_value("probe.epochs")?,
        batch_size: kv.parse_value("probe.batch_size")?,
        head_lr: kv.parse_value("probe.head_lr")?,
        head_min_lr: kv.parse_value("probe.head_min_lr")?,
        warmup_epochs: kv.parse_value("probe.warmup_epochs")?,
        weight_decay: kv.parse_value("probe.weight_decay")?,
        threshold: kv.parse_value("probe.threshold")?,
        profile_stride: kv.parse_value("probe.stride")?,
        seed: kv.parse_value("probe.seed")?,
        ..base
    };
    if c.mode == ProbeMode::FineTune {
        c.encoder_lr = kv.parse_value("probe.encoder_lr")?;
        c.depth = kv.parse_value::<FinetuneDepth>("probe.depth")?;
    }
    c.validate()?;
    Ok(c)
}

fn predictions_csv(set: &LabeledSet, manifest: &Manifest, out: &[f64], head: HeadKind) -> String {
    let k = head.outputs();
    let col = match head {
        HeadKind::MultiLabel(_) => "p",
        HeadKind::Regression(_) => "target",
    };
    let mut s = String::from("cube_id");
    for j in 0..k {
        s.push_str(&format!(",{col}_{j}"));
    }
    s.push('\n');
    let ids = manifest.split(Split::Val).map(|e| e.cube_id.as_str());
    for (i, id) in ids.take(set.len()).enumerate() {
        s.push_str(id);
        for v in &out[i * k..(i + 1) * k] {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Head weights plus the fixed feature standardisation and target scaling.
fn head_checkpoint(header: KeyValues, head: &ParamSet, norm_mean: &[f32], norm_inv: &[f32], scale: &[(f32, f32)]) -> Result<Checkpoint> {
    let mut params = head.clone();
    params.insert("norm.mean", Tensor::from_vec(norm_mean.to_vec())?)?;
    params.insert("norm.inv_std", Tensor::from_vec(norm_inv.to_vec())?)?;
    if !scale.is_empty() {
        params.insert("target.mean", Tensor::from_vec(scale.iter().map(|s| s.0).collect())?)?;
        params.insert("target.std", Tensor::from_vec(scale.iter().map(|s| s.1).collect())?)?;
    }
    Ok(Checkpoint::new(header, params))
}

pub fn probe(global: &Global, a: ProbeArgs, finetune: Option<(Option<f64>, Option<Depth>)>) -> Result<()> {
    let name = if finetune.is_some() { "finetune" } else { "probe" };
    let encoder = EncoderState::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let (manifest, cubes) = load_dataset(&a.data)?;
    let (probe_args, ft) = (a, finetune);

    let mut defaults = KeyValues::new();
    let placeholder = HeadKind::MultiLabel(1);
    let base = match ft {
        Some(_) => ProbeConfig::finetune(placeholder),
        None => ProbeConfig::probe(placeholder),
    };
    probe_defaults(&base, &mut defaults);
    defaults.set("probe.task", "multilabel");
    defaults.set("probe.label_fraction", 1.0);
    defaults.set("run.checkpoint", probe_args.checkpoint.display());
    defaults.set("run.data", probe_args.data.display());
    run_keys(global, &mut defaults);

    let a = probe_args;
    let mut flags = Overrides::default();
    flags
        .set("probe.task", a.task.map(task_str))
        .set("probe.epochs", a.epochs)
        .set("probe.batch_size", a.batch_size)
        .set("probe.head_lr", a.head_lr)
        .set("probe.warmup_epochs", a.warmup_epochs)
        .set("probe.weight_decay", a.weight_decay)
        .set("probe.threshold", a.threshold)
        .set("probe.stride", a.stride)
        .set("probe.label_fraction", a.label_fraction)
        .set("probe.seed", a.seed);
    if let Some((lr, depth)) = ft {
        flags.set("probe.encoder_lr", lr).set(
            "probe.depth",
            depth.map(|d| match d {
                Depth::Last => "last",
                Depth::All => "all",
            }),
        );
    }
    let kv = resolved(global, &defaults, &flags)?;
    let task = parse_task(kv.require("probe.task")?)?;
    let head = head_kind(task, &manifest);
    let config = probe_from_kv(&kv, ProbeConfig { head, ..base })?;
    let fraction: f64 = kv.parse_value("probe.label_fraction")?;

    let train_full = labeled(&manifest, &cubes, Split::Train)?;
    let val = labeled(&manifest, &cubes, Split::Val)?;
    let train = if fraction < 1.0 {
        let (subsets, warnings) = nested_stratified_subsets(&train_full, &[fraction], config.seed)?;
        for w in warnings {
            log::warn!("{w}");
        }
        train_full.select(&subsets[0])
    } else if fraction == 1.0 {
        train_full
    } else {
        return Err(usage(format!("label fraction {fraction} outside (0, 1]")));
    };
    log::info!("{name}: {} training cubes, {} validation cubes", train.len(), val.len());

    let layout = Layout::create(&global.out)?;
    layout.write_config(name, &kv)?;
    let outcome = run_probe(&encoder, &train, &val, &config)?;
    for r in &outcome.trace {
        println!("epoch {}/{} loss {:.6} head_lr {:.3e}", r.epoch + 1, config.epochs, r.loss, r.head_lr);
    }

    let report = outcome.report;
    write_report(&layout, name, &report)?;
    let out = predict(
        &outcome.encoder,
        &outcome.head,
        &outcome.feature_norm,
        &outcome.target_scale,
        &val,
        &config,
    )?;
    write_text(
        &layout.metrics.join(format!("{name}_predictions.csv")),
        &predictions_csv(&val, &manifest, &out, head),
    )?;
    if let HeadKind::MultiLabel(k) = head {
        let eval = MultiLabelEval::from_probs(k, val.labels.clone(), out, config.threshold)?;
        write_text(
            &layout.metrics.join(format!("{name}_per_class.csv")),
            &per_class_csv(&eval.accumulate()),
        )?;
    }
    let mut trace = String::from("epoch,loss,head_lr\n");
    for r in &outcome.trace {
        trace.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.head_lr));
    }
    write_text(&layout.traces.join(format!("{name}_trace.csv")), &trace)?;

    let scale = match head {
        HeadKind::Regression(_) => outcome.target_scale.clone(),
        HeadKind::MultiLabel(_) => Vec::new(),
    };
    head_checkpoint(
        kv.clone(),
        &outcome.head,
        &outcome.feature_norm.mean,
        &outcome.feature_norm.inv_std,
        &scale,
    )?
    .save(layout.checkpoints.join(format!("{name}_head.ckpt")))?;
    if config.mode == ProbeMode::FineTune {
        outcome
            .encoder
            .to_checkpoint()?
            .save(layout.checkpoints.join("finetune_encoder.ckpt"))?;
    }
    print!("{report}");
    Ok(())
}

fn write_report(layout: &Layout, name: &str, report: &MetricsReport) -> Result<()> {
    write_text(&layout.metrics.join(format!("{name}.txt")), &report.to_string())?;
    write_text(
        &layout.metrics.join(format!("{name}.csv")),
        &format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )
}

pub fn sweep_mask(global: &Global, a: SweepArgs) -> Result<()> {
    let (manifest, cubes) = load_dataset(&a.data)?;
    let train_cubes = split_cubes(&manifest, &cubes, Split::Train);
    let channels = channels_of(&train_cubes)?;
    let preset = a.preset.unwrap_or(Preset::Desk);

    let mut defaults = KeyValues::new();
    pix_defaults(preset, channels).write_kv(&mut defaults);
    let base_probe = ProbeConfig::probe(HeadKind::Regression(1));
    probe_defaults(&base_probe, &mut defaults);
    defaults.set("probe.task", "regression");
    defaults.set("sweep.ratios", "0.1,0.3,0.5,0.7");
    defaults.set("run.preset", format!("{preset:?}").to_lowercase());
    defaults.set("run.data", a.data.display());
    run_keys(global, &mut defaults);

    let mut flags = Overrides::default();
    flags
        .set(
            "sweep.ratios",
            a.ratios
                .as_ref()
                .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
        )
        .set("pix.epochs", a.epochs)
        .set("pix.batch_size", a.batch_size)
        .set("pix.base_lr", a.lr)
        .set("pix.stride", a.stride)
        .set("pix.seed", a.seed)
        .set("probe.task", a.task.map(task_str))
        .set("probe.epochs", a.probe_epochs)
        .set("probe.head_lr", a.head_lr);
    let kv = resolved(global, &defaults, &flags)?;
    let ratios = kv
        .require("sweep.ratios")?
        .split(',')
        .map(|r| r.trim().parse::<f64>().map_err(|_| usage(format!("bad ratio {r:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let base = PixConfig::from_kv(&kv)?;
    for &r in &ratios {
        PixConfig { mask_ratio: r, ..base }.validate()?;
    }
    let head = head_kind(parse_task(kv.require("probe.task")?)?, &manifest);
    let probe = probe_from_kv(&kv, ProbeConfig { head, ..base_probe })?;

    let layout = Layout::create(&global.out)?;
    layout.write_config("sweep_mask", &kv)?;
    let train = labeled(&manifest, &cubes, Split::Train)?;
    let val = labeled(&manifest, &cubes, Split::Val)?;
    let profiles = profiles_of(&train_cubes, base.stride)?;
    log::info!(
        "sweeping {} ratios over {} profiles, seed {} for every run",
        ratios.len(),
        profiles.len(),
        base.seed
    );
    let rows = masking_ratio_sweep(&profiles, base, &ratios, &train, &val, &probe)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        println!("ratio {} {} {:.6}", r.ratio, r.metric, r.value);
        csv.push_str(&format!("{},{},{}\n", r.ratio, r.metric, r.value));
    }
    write_text(&layout.metrics.join("sweep_mask.csv"), &csv)
}

pub fn export_attn(global: &Global, a: ExportArgs) -> Result<()> {
    let encoder = EncoderState::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let cfg = encoder.config;
    if !cfg.token_kind.is_spatial() {
        return Err(usage(format!(
            "{} holds a spectral encoder; attention maps need a spatial one",
            a.checkpoint.display()
        )));
    }
    let block = a.block.unwrap_or(cfg.num_blocks - 1);
    if block >= cfg.num_blocks {
        return Err(usage(format!("block {block} out of range for {} blocks", cfg.num_blocks)));
    }
    let cube = read_cube(&a.cube)?;
    let prepared = encoder.prepare_cube(&cube)?;
    let tokens = TokenBatch::spatial(&cfg, &[&prepared])?;
    let maps = encoder.attention_maps(&tokens, block)?;

    let mut kv = KeyValues::new();
    kv.set("attn.checkpoint", a.checkpoint.display());
    kv.set("attn.cube", a.cube.display());
    kv.set("attn.block", block);
    run_keys(global, &mut kv);
    let layout = Layout::create(&global.out)?;
    layout.write_config("export_attn", &kv)?;

    let n = maps.shape()[2];
    let mut summary = String::from("head,self_weight,patch_sum\n");
    for h in 0..cfg.num_heads {
        let row = &maps.data()[h * n * n..h * n * n + n];
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(usage(format!("head {h}: attention row sums to {total}")));
        }
        let grid = summary_attention_grid(&maps, &tokens, 0, h)?;
        let (rows, cols) = (grid.shape()[0], grid.shape()[1]);
        let mut text = String::new();
        for r in 0..rows {
            let line: Vec<String> = grid.data()[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        write_text(&layout.traces.join(format!("attention_head{h}.csv")), &text)?;
        let patch_sum: f64 = grid.data().iter().map(|&v| v as f64).sum();
        summary.push_str(&format!("{h},{},{patch_sum}\n", row[0]));
        println!("head {h}: {rows}x{cols} grid, self weight {:.4}", row[0]);
    }
    write_text(&layout.traces.join("attention_summary.csv"), &summary)
}

pub fn score(global: &Global, a: ScoreArgs) -> Result<()> {
    let mut defaults = KeyValues::new();
    defaults.set("score.threshold", specssl::metrics::DEFAULT_THRESHOLD);
    defaults.set("score.predictions", a.predictions.display());
    defaults.set("score.labels", a.labels.display());
    run_keys(global, &mut defaults);
    let mut flags = Overrides::default();
    flags.set("score.threshold", a.threshold);
    let kv = resolved(global, &defaults, &flags)?;
    let t: f64 = kv.parse_value("score.threshold")?;
    if !(t > 0.0 && t < 1.0) {
        return Err(usage(format!("threshold {t} outside (0, 1)")));
    }
    let report = score_csv(&a.predictions, &a.labels, t)?;
    let layout = Layout::create(&global.out)?;
    layout.write_config("score", &kv)?;
    write_report(&layout, "score", &report)?;
    print!("{report}");
    Ok(())
}
