//! Task heads on top of a pretrained encoder: linear probing and fine-tuning
//! for multi-label classification and parameter regression.
//!
//! Both protocols share one training loop. Cube features are computed one
//! cube at a time, so a frozen encoder yields exactly the cached features and
//! fine-tuning with a zero encoder rate reproduces the probe bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::mix_seed;
use crate::autodiff::{Tape, Var};
use crate::data::{extract_profiles, SpectralCube, SynthCube};
use crate::error::{Error, Result};
use crate::metrics::{multi_target_regression, MetricsReport, MultiLabelEval};
use crate::optim::AdamWState;
use crate::params::{Bound, ParamSet};
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::transformer::{encoder_forward, EncoderState, TokenBatch, INIT_STD};

/// Logit clamp applied before the logistic in the loss.
const LOGIT_CLAMP: f32 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    LinearProbe,
    FineTune,
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeMode::LinearProbe => "probe",
            ProbeMode::FineTune => "finetune",
        })
    }
}

impl FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(ProbeMode::LinearProbe),
            "finetune" => Ok(ProbeMode::FineTune),
            other => Err(Error::Parameter(format!("unknown mode {other:?} (probe|finetune)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Independent sigmoid outputs for `K` classes.
    MultiLabel(usize),
    /// `M` real-valued targets.
    Regression(usize),
}

impl HeadKind {
    pub fn outputs(&self) -> usize {
        match *self {
            HeadKind::MultiLabel(k) | HeadKind::Regression(k) => k,
        }
    }
}

/// Which encoder parameters fine-tuning updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneDepth {
    LastBlock,
    All,
}

impl FromStr for FinetuneDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(FinetuneDepth::LastBlock),
            "all" => Ok(FinetuneDepth::All),
            other => Err(Error::Parameter(format!("unknown fine-tune depth {other:?} (last|all)"))),
        }
    }
}

impl fmt::Display for FinetuneDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneDepth::LastBlock => "last",
            FinetuneDepth::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub head: HeadKind,
    /// Constant encoder rate; zero in probe mode.
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub head_min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub depth: FinetuneDepth,
    /// Decision threshold on sigmoid outputs.
    pub threshold: f64,
    /// Profile stride used to summarise a cube with a spectral encoder.
    pub profile_stride: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn probe(head: HeadKind) -> Self {
        ProbeConfig {
            mode: ProbeMode::LinearProbe,
            head,
            encoder_lr: 0.0,
            head_lr: 1e-2,
            head_min_lr: 1e-6,
            warmup_epochs: 20,
            epochs: 100,
            batch_size: 8,
            weight_decay: 0.0,
            depth: FinetuneDepth::All,
            threshold: 0.5,
            profile_stride: 4,
            seed: 0,
        }
    }

    pub fn finetune(head: HeadKind) -> Self {
        ProbeConfig {
            mode: ProbeMode::FineTune,
            encoder_lr: 1e-6,
            ..ProbeConfig::probe(head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.head.outputs() == 0 {
            return bad("head needs at least one output".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.profile_stride == 0 {
            return bad("epochs, batch size and profile stride must be positive".into());
        }
        if !(self.head_lr > 0.0 && self.head_min_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("head learning rates and weight decay must be non-negative".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        match self.mode {
            ProbeMode::LinearProbe if self.encoder_lr != 0.0 => {
                bad(format!("linear probing freezes the encoder; encoder lr {} must be 0", self.encoder_lr))
            }
            ProbeMode::FineTune if !(self.encoder_lr >= 0.0 && self.encoder_lr <= self.head_lr) => bad(format!(
                "fine-tune encoder lr {} must lie in [0, head lr {}]",
                self.encoder_lr, self.head_lr
            )),
            _ => Ok(()),
        }
    }
}

/// Cubes with per-cube labels and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub cubes: Vec<SpectralCube>,
    pub n_labels: usize,
    /// `N x n_labels`, row-major.
    pub labels: Vec<u8>,
    pub n_targets: usize,
    /// `N x n_targets`, row-major.
    pub targets: Vec<f32>,
}

impl LabeledSet {
    pub fn new(
        cubes: Vec<SpectralCube>,
        n_labels: usize,
        labels: Vec<u8>,
        n_targets: usize,
        targets: Vec<f32>,
    ) -> Result<Self> {
        let n = cubes.len();
        if labels.len() != n * n_labels || targets.len() != n * n_targets {
            return Err(Error::Contract(format!(
                "{n} cubes with {} label and {} target values",
                labels.len(),
                targets.len()
            )));
        }
        Ok(LabeledSet {
            cubes,
            n_labels,
            labels,
            n_targets,
            targets,
        })
    }

    pub fn from_synth(items: &[SynthCube]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("empty labeled set".into()))?;
        Self::new(
            items.iter().map(|c| c.cube.clone()).collect(),
            first.labels.len(),
            items.iter().flat_map(|c| c.labels.iter().copied()).collect(),
            first.targets.len(),
            items.iter().flat_map(|c| c.targets.iter().copied()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn label_row(&self, i: usize) -> &[u8] {
        &self.labels[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn target_row(&self, i: usize) -> &[f32] {
        &self.targets[i * self.n_targets..(i + 1) * self.n_targets]
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            cubes: idx.iter().map(|&i| self.cubes[i].clone()).collect(),
            n_labels: self.n_labels,
            labels: idx.iter().flat_map(|&i| self.label_row(i).to_vec()).collect(),
            n_targets: self.n_targets,
            targets: idx.iter().flat_map(|&i| self.target_row(i).to_vec()).collect(),
        }
    }
}

/// Representation `[1 x d]` of one raw cube: the summary token for a spatial
/// encoder, or the mean over the cube's profiles of the mean band-token
/// output for a spectral one.
pub fn cube_feature(
    encoder: &EncoderState,
    tape: &mut Tape,
    bound: &Bound,
    cube: &SpectralCube,
    profile_stride: usize,
) -> Result<Var> {
    let cfg = &encoder.config;
    if cube.channels() != cfg.token_kind.channels() {
        return Err(Error::Checkpoint(format!(
            "encoder expects {} bands, data has {}",
            cfg.token_kind.channels(),
            cube.channels()
        )));
    }
    if cfg.token_kind.is_spatial() {
        let prepared = encoder.prepare_cube(cube)?;
        let tokens = TokenBatch::spatial(cfg, &[&prepared])?;
        return Ok(encoder_forward(cfg, tape, &tokens, bound)?.summary);
    }
    let mut profiles = extract_profiles(cube, profile_stride)?;
    encoder.prepare_profiles(&mut profiles.profiles);
    let n = profiles.len();
    let tokens = TokenBatch::spectral(cfg, &profiles.profiles, n, None)?;
    let per_profile = encoder_forward(cfg, tape, &tokens, bound)?.summary;
    let avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f32));
    tape.matmul(avg, per_profile)
}

/// Inference-only features `[N x d]` for every cube.
pub fn extract_features(encoder: &EncoderState, cubes: &[SpectralCube], profile_stride: usize) -> Result<Tensor> {
    let d = encoder.config.embed_dim;
    let mut out = Vec::with_capacity(cubes.len() * d);
    for cube in cubes {
        let mut tape = Tape::new();
        let bound = encoder.params.bind(&mut tape, false);
        let f = cube_feature(encoder, &mut tape, &bound, cube, profile_stride)?;
        out.extend_from_slice(tape.value(f));
    }
    Tensor::new(vec![cubes.len(), d], out)
}

/// Stacks `[1 x d]` rows into `[n x d]`; the one-hot products copy each row
/// exactly.
fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let n = rows.len();
    let mut acc: Option<Var> = None;
    for (i, &r) in rows.iter().enumerate() {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let e = tape.constant(Tensor::new(vec![n, 1], e)?);
        let placed = tape.matmul(e, r)?;
        acc = Some(match acc {
            None => placed,
            Some(a) => tape.add(a, placed)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("no rows to stack".into()))
}

/// Per-dimension feature standardisation fitted on training features and
/// held fixed for the whole run.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl FeatureNorm {
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = (features.shape()[0], features.shape()[1]);
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for i in 0..n {
            for (j, &v) in features.row(i).iter().enumerate() {
                mean[j] += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        for i in 0..n {
            for (j, &v) in features.row(i).iter().enumerate() {
                var[j] += (v as f64 - mean[j]).powi(2);
            }
        }
        FeatureNorm {
            mean: mean.iter().map(|&m| m as f32).collect(),
            inv_std: var
                .iter()
                .map(|&v| (1.0 / (v / n.max(1) as f64).sqrt().max(1e-6)) as f32)
                .collect(),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = self.mean.len();
        let m = tape.constant(Tensor::new(vec![d], self.mean.clone())?);
        let s = tape.constant(Tensor::new(vec![d], self.inv_std.clone())?);
        let centered = tape.sub(x, m)?;
        tape.mul(centered, s)
    }
}

/// Head parameters `head.w [d x K]`, `head.b [K]`.
pub fn init_head<R: Rng + ?Sized>(input_dim: usize, outputs: usize, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    p.insert("head.w", Tensor::trunc_normal(&[input_dim, outputs], INIT_STD, rng))?;
    p.insert("head.b", Tensor::zeros(&[outputs]))?;
    Ok(p)
}

/// Linear layer followed by an elementwise logistic; rows are independent
/// per-class probabilities.
pub fn multilabel_head_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.linear(x, w, Some(b))?;
    tape.sigmoid(z)
}

pub fn regression_head_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.linear(x, w, Some(b))
}

fn check_binary(targets: &[u8]) -> Result<()> {
    match targets.iter().find(|&&t| t > 1) {
        Some(t) => Err(Error::Contract(format!("multi-label targets must be 0 or 1, found {t}"))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy over classes and batch from logits `[B x K]`.
/// Logits are clamped to +-30 before the logistic.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: &[u8]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if targets.len() != shape.iter().product::<usize>() {
        return Err(Error::dim("bce", format!("logits {shape:?} with {} targets", targets.len())));
    }
    check_binary(targets)?;
    let clamped: Vec<f32> = tape.value(logits).iter().map(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
    // Shift the logits onto the clamped values without cutting the gradient.
    let shift: Vec<f32> = clamped.iter().zip(tape.value(logits)).map(|(c, v)| c - v).collect();
    let shift = tape.constant(Tensor::new(shape.clone(), shift)?);
    let z = tape.add(logits, shift)?;
    let p = tape.sigmoid(z)?;
    let ones = tape.constant(Tensor::ones(&shape));
    let q = tape.sub(ones, p)?;
    let log_p = tape.log(p, 1e-12)?;
    let log_q = tape.log(q, 1e-12)?;
    let y: Vec<f32> = targets.iter().map(|&t| t as f32).collect();
    let not_y: Vec<f32> = y.iter().map(|v| 1.0 - v).collect();
    let y = tape.constant(Tensor::new(shape.clone(), y)?);
    let not_y = tape.constant(Tensor::new(shape.clone(), not_y)?);
    let a = tape.mul(log_p, y)?;
    let b = tape.mul(log_q, not_y)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s)?;
    tape.scale(total, -1.0 / targets.len() as f32)
}

/// Plain-float mean binary cross-entropy of probabilities, clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_multilabel_loss(probs: &[f64], targets: &[u8]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::dim("bce", format!("{} probabilities, {} targets", probs.len(), targets.len())));
    }
    check_binary(targets)?;
    let s: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            if t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / probs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub head_lr: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub head: ParamSet,
    pub encoder: EncoderState,
    pub feature_norm: FeatureNorm,
    /// Training-set target mean and std used to standardise regression
    /// targets.
    pub target_scale: Vec<(f32, f32)>,
    pub report: MetricsReport,
    pub trace: Vec<ProbeEpochRecord>,
}

fn target_scale(set: &LabeledSet) -> Vec<(f32, f32)> {
    let (n, m) = (set.len(), set.n_targets);
    (0..m)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| set.targets[i * m + j] as f64).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            (mean as f32, sd.max(1e-6) as f32)
        })
        .collect()
}

fn trainable_in_finetune(name: &str, depth: FinetuneDepth, blocks: usize) -> bool {
    match depth {
        FinetuneDepth::All => true,
        FinetuneDepth::LastBlock => name.starts_with(&format!("blocks.{}.", blocks - 1)),
    }
}

fn bind_encoder(encoder: &EncoderState, tape: &mut Tape, cfg: &ProbeConfig) -> Result<Bound> {
    let blocks = encoder.config.num_blocks;
    let vars: Vec<Var> = encoder
        .params
        .iter()
        .map(|(name, t)| {
            let train = cfg.mode == ProbeMode::FineTune && trainable_in_finetune(name, cfg.depth, blocks);
            tape.param(t, train)
        })
        .collect();
    Bound::from_vars(encoder.params.names(), vars)
}

/// Trains a head on `train` (and the encoder too when fine-tuning) and
/// evaluates on `val`. Validation data is only read after training.
pub fn run_probe(
    encoder: &EncoderState,
    train: &LabeledSet,
    val: &LabeledSet,
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("probe needs non-empty train and validation sets".into()));
    }
    let k = config.head.outputs();
    let (have, what) = match config.head {
        HeadKind::MultiLabel(_) => (train.n_labels, "labels"),
        HeadKind::Regression(_) => (train.n_targets, "targets"),
    };
    if have != k {
        return Err(Error::Contract(format!("head has {k} outputs but the data has {have} {what}")));
    }
    if let HeadKind::MultiLabel(_) = config.head {
        check_binary(&train.labels)?;
    }

    let cached = extract_features(encoder, &train.cubes, config.profile_stride)?;
    let norm = FeatureNorm::fit(&cached);
    let scale = target_scale(train);
    let d = encoder.config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = init_head(d, k, &mut rng)?;
    let mut head_opt = AdamWState::new(&head);
    let mut enc = encoder.clone();
    let mut enc_opt = AdamWState::new(&enc.params);
    let frozen: Vec<String> = enc
        .params
        .names()
        .iter()
        .filter(|n| !trainable_in_finetune(n, config.depth, enc.config.num_blocks))
        .cloned()
        .collect();

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let warmup = (config.warmup_epochs * steps_per_epoch).min(total);
    let lr = Schedule::warmup_cosine(config.head_lr, config.head_min_lr, warmup, total)?;

    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));
        let (mut loss_sum, mut head_lr) = (0.0f64, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let hb = head.bind(&mut tape, true);
            let feats = match config.mode {
                ProbeMode::FineTune => {
                    let eb = bind_encoder(&enc, &mut tape, config)?;
                    let rows = chunk
                        .iter()
                        .map(|&i| cube_feature(&enc, &mut tape, &eb, &train.cubes[i], config.profile_stride))
                        .collect::<Result<Vec<_>>>()?;
                    let stacked = stack_rows(&mut tape, &rows)?;
                    Some((stacked, eb))
                }
                ProbeMode::LinearProbe => None,
            };
            let (x, enc_bound) = match feats {
                Some((x, eb)) => (x, Some(eb)),
                None => {
                    let rows: Vec<f32> = chunk.iter().flat_map(|&i| cached.row(i).to_vec()).collect();
                    (tape.constant(Tensor::new(vec![chunk.len(), d], rows)?), None)
                }
            };
            let x = norm.apply(&mut tape, x)?;
            let z = tape.linear(x, hb.get("head.w")?, Some(hb.get("head.b")?))?;
            let loss = match config.head {
                HeadKind::MultiLabel(_) => {
                    let y: Vec<u8> = chunk.iter().flat_map(|&i| train.label_row(i).to_vec()).collect();
                    bce_with_logits(&mut tape, z, &y)?
                }
                HeadKind::Regression(m) => {
                    let y: Vec<f32> = chunk
                        .iter()
                        .flat_map(|&i| train.target_row(i).iter().zip(&scale).map(|(&t, &(mu, sd))| (t - mu) / sd))
                        .collect();
                    let y = tape.constant(Tensor::new(vec![chunk.len(), m], y)?);
                    let diff = tape.sub(z, y)?;
                    let sq = tape.mul(diff, diff)?;
                    tape.mean(sq)?
                }
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite probe loss at epoch {epoch}")));
            }
            let mut grads = tape.backward(loss)?;
            head.store_grads(&hb, &mut grads)?;
            head_lr = lr.at(step)?;
            head_opt.step(&mut head, head_lr as f32, config.weight_decay as f32)?;
            head.zero_grads();
            if let Some(eb) = enc_bound {
                enc.params.store_grads(&eb, &mut grads)?;
                for name in &frozen {
                    if let Some(t) = enc.params.get_mut(name) {
                        t.zero_grad();
                    }
                }
                enc_opt.step(&mut enc.params, config.encoder_lr as f32, config.weight_decay as f32)?;
                enc.params.zero_grads();
            }
            loss_sum += value as f64;
            step += 1;
        }
        trace.push(ProbeEpochRecord {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            head_lr,
        });
    }

    let report = evaluate_head(&enc, &head, &norm, &scale, val, config)?;
    Ok(ProbeOutcome {
        head,
        encoder: enc,
        feature_norm: norm,
        target_scale: scale,
        report,
        trace,
    })
}

/// Head outputs for `set`: probabilities for multi-label heads, targets in
/// original units for regression heads; `[N x K]` row-major.
pub fn predict(
    encoder: &EncoderState,
    head: &ParamSet,
    norm: &FeatureNorm,
    scale: &[(f32, f32)],
    set: &LabeledSet,
    config: &ProbeConfig,
) -> Result<Vec<f64>> {
    let feats = extract_features(encoder, &set.cubes, config.profile_stride)?;
    let mut tape = Tape::new();
    let hb = head.bind(&mut tape, false);
    let x = tape.constant(feats);
    let x = norm.apply(&mut tape, x)?;
    let (w, b) = (hb.get("head.w")?, hb.get("head.b")?);
    match config.head {
        HeadKind::MultiLabel(_) => {
            let p = multilabel_head_forward(&mut tape, x, w, b)?;
            Ok(tape.value(p).iter().map(|&v| v as f64).collect())
        }
        HeadKind::Regression(m) => {
            let y = regression_head_forward(&mut tape, x, w, b)?;
            Ok(tape
                .value(y)
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let (mu, sd) = scale[i % m];
                    (v * sd + mu) as f64
                })
                .collect())
        }
    }
}

fn evaluate_head(
    encoder: &EncoderState,
    head: &ParamSet,
    norm: &FeatureNorm,
    scale: &[(f32, f32)],
    val: &LabeledSet,
    config: &ProbeConfig,
) -> Result<MetricsReport> {
    let out = predict(encoder, head, norm, scale, val, config)?;
    match config.head {
        HeadKind::MultiLabel(k) => {
            let eval = MultiLabelEval::from_probs(k, val.labels.clone(), out, config.threshold)?;
            Ok(eval.accumulate().report())
        }
        HeadKind::Regression(m) => {
            let truth: Vec<f64> = val.targets.iter().map(|&v| v as f64).collect();
            Ok(MetricsReport::regression(multi_target_regression(&out, &truth, m)?))
        }
    }
}

/// Nested stratified subsets of `set`, one per fraction (any order), each a
/// prefix of one seeded ordering. Strata are label combinations, spread
/// evenly along the ordering. A prefix missing every positive of some class
/// present in the full set pulls the next such sample forward and records a
/// warning.
pub fn nested_stratified_subsets(
    set: &LabeledSet,
    fractions: &[f64],
    seed: u64,
) -> Result<(Vec<Vec<usize>>, Vec<String>)> {
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Parameter(format!("label fraction {f} outside (0, 1]")));
    }
    let n = set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: std::collections::BTreeMap<Vec<u8>, Vec<usize>> = Default::default();
    for i in 0..n {
        strata.entry(set.label_row(i).to_vec()).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let offset: f64 = rng.random();
        let len = members.len() as f64;
        for (r, &i) in members.iter().enumerate() {
            keyed.push(((r as f64 + offset) / len, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();

    let mut sorted: Vec<(usize, f64)> = fractions.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let k = set.n_labels;
    let mut warnings = Vec::new();
    let mut lengths = vec![0; fractions.len()];
    for &(slot, f) in &sorted {
        let len = ((f * n as f64).ceil() as usize).clamp(1, n);
        for class in 0..k {
            let has = |i: usize| set.labels[i * k + class] == 1;
            if order[..len].iter().any(|&i| has(i)) {
                continue;
            }
            if let Some(pos) = (len..n).find(|&p| has(order[p])) {
                // Only the tail of this prefix moves, so smaller prefixes stay put.
                order.swap(len - 1, pos);
                warnings.push(format!(
                    "fraction {f}: no positives of class {class}; resampled one from the remaining pool"
                ));
            }
        }
        lengths[slot] = len;
    }
    let subsets = lengths.iter().map(|&len| order[..len].to_vec()).collect();
    Ok((subsets, warnings))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FractionRow {
    pub fraction: f64,
    pub init: String,
    pub report: MetricsReport,
}

pub const FRACTION_CSV_HEADER: &str = "fraction,init,metric,value";

/// Long-format rows `fraction,init,metric,value`.
pub fn fraction_csv(rows: &[FractionRow]) -> String {
    let mut out = String::from(FRACTION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        for (metric, value) in r.report.fields() {
            out.push_str(&format!("{},{},{metric},{value}\n", r.fraction, r.init));
        }
    }
    out
}

/// Probes every named encoder on nested training subsets of `train`.
pub fn label_fraction_study(
    encoders: &[(&str, &EncoderState)],
    train: &LabeledSet,
    val: &LabeledSet,
    fractions: &[f64],
    config: &ProbeConfig,
) -> Result<(Vec<FractionRow>, Vec<String>)> {
    let (subsets, warnings) = nested_stratified_subsets(train, fractions, config.seed)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut rows = Vec::with_capacity(fractions.len() * encoders.len());
    for (f, idx) in fractions.iter().zip(&subsets) {
        let subset = train.select(idx);
        for (name, enc) in encoders {
            let out = run_probe(enc, &subset, val, config)?;
            rows.push(FractionRow {
                fraction: *f,
                init: name.to_string(),
                report: out.report,
            });
        }
    }
    Ok((rows, warnings))
}
