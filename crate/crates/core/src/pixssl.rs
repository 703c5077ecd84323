//! Pixel-level masked spectral autoencoding.
//!
//! Masking works on band groups, the same unit the spectral encoder
//! tokenizes, so a masked group is never read by the encoder. The
//! lightweight decoder re-inserts one shared mask token at every masked
//! position, adds positions to the full sequence and projects each token back
//! to its group's band values.
//!
//! Parameter names: `encoder.*` as in [`EncoderState`], and
//! `decoder.adapter.{w,b}`, `decoder.mask_token`, `decoder.blocks.i.*`,
//! `decoder.head.{w,b}`.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::mix_seed;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{BandStats, SpectralBatch};
use crate::downstream::{run_probe, HeadKind, LabeledSet, ProbeConfig};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::metrics::MetricsReport;
use crate::objssl::{load_moments, save_moments};
use crate::optim::AdamWState;
use crate::params::{Bound, ParamSet};
use crate::schedule::{scaled_lr, Schedule};
use crate::tensor::Tensor;
use crate::transformer::{
    encoder_block, encoder_forward, init_block, sinusoid_1d, BlockVars, EncoderConfig, EncoderState, TokenBatch,
    TokenKind, INIT_STD,
};

/// Which positions the reconstruction error covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    MaskedOnly,
    AllBands,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::MaskedOnly => "masked",
            LossMode::AllBands => "all",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(LossMode::MaskedOnly),
            "all" => Ok(LossMode::AllBands),
            other => Err(Error::Parameter(format!("unknown loss mode {other:?} (masked|all)"))),
        }
    }
}

/// Masked and visible units (band groups), both sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub units: usize,
    /// Bands per unit.
    pub group_size: usize,
    pub ratio: f64,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPlan {
    /// Plan from an explicit masked set.
    pub fn from_masked(units: usize, group_size: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.is_empty() || masked.len() >= units || masked.iter().any(|&m| m >= units) {
            return Err(Error::Parameter(format!("invalid mask {masked:?} over {units} units")));
        }
        let visible = (0..units).filter(|u| masked.binary_search(u).is_err()).collect();
        Ok(MaskPlan {
            units,
            group_size,
            ratio: masked.len() as f64 / units as f64,
            masked,
            visible,
        })
    }

    pub fn channels(&self) -> usize {
        self.units * self.group_size
    }

    /// Band indices covered by the masked groups, ascending.
    pub fn masked_bands(&self) -> Vec<usize> {
        self.masked
            .iter()
            .flat_map(|&g| g * self.group_size..(g + 1) * self.group_size)
            .collect()
    }

    /// Per-band weights `[C]`: one where the loss applies, zero elsewhere.
    pub fn band_weights(&self, mode: LossMode) -> Vec<f32> {
        let mut w = vec![0.0; self.channels()];
        match mode {
            LossMode::AllBands => w.iter_mut().for_each(|v| *v = 1.0),
            LossMode::MaskedOnly => self.masked_bands().into_iter().for_each(|b| w[b] = 1.0),
        }
        w
    }
}

/// Number of masked units for `ratio` over `units`, validated.
pub fn masked_count(units: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = (ratio * units as f64).round() as usize;
    if k == 0 || k >= units {
        return Err(Error::Parameter(format!(
            "mask ratio {ratio} over {units} units masks {k}; need between 1 and {}",
            units.saturating_sub(1)
        )));
    }
    Ok(k)
}

/// Uniform sample of `round(ratio * units)` masked units without
/// replacement; single bands when `units` is the band count.
pub fn sample_mask<R: Rng + ?Sized>(units: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    sample_group_mask(units, 1, ratio, rng)
}

/// Group-level plan over `units` groups of `group_size` bands.
pub fn sample_group_mask<R: Rng + ?Sized>(
    units: usize,
    group_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let k = masked_count(units, ratio)?;
    let mut plan = MaskPlan::from_masked(units, group_size, index::sample(rng, units, k).into_vec())?;
    plan.ratio = ratio;
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixConfig {
    pub encoder: EncoderConfig,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_mlp: usize,
    pub decoder_blocks: usize,
    pub mask_ratio: f64,
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at batch size 256; the actual rate scales linearly.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    /// Profile extraction stride in pixels.
    pub stride: usize,
    pub seed: u64,
}

impl PixConfig {
    pub fn new(channels: usize) -> Self {
        let encoder = EncoderConfig::spectral(channels);
        PixConfig {
            encoder,
            decoder_dim: encoder.embed_dim / 2,
            decoder_heads: 4,
            decoder_mlp: encoder.embed_dim,
            decoder_blocks: 2,
            mask_ratio: 0.5,
            loss_mode: LossMode::MaskedOnly,
            epochs: 100,
            batch_size: 256,
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            wd_start: 0.04,
            wd_end: 0.4,
            stride: 3,
            seed: 0,
        }
    }

    /// Small preset that trains in seconds on one core.
    pub fn desk(channels: usize) -> Self {
        let mut cfg = PixConfig::new(channels);
        cfg.encoder = EncoderConfig {
            embed_dim: 64,
            num_heads: 4,
            mlp_hidden: 128,
            num_blocks: 3,
            token_kind: TokenKind::SpectralBand { group_size: 5, channels },
            max_tokens: 256,
        };
        cfg.decoder_dim = 32;
        cfg.decoder_heads = 4;
        cfg.decoder_mlp = 64;
        cfg.epochs = 50;
        // Small batches need many more steps than the full-scale recipe, so
        // the base rate is raised; the linear batch scaling still applies.
        cfg.batch_size = 64;
        cfg.base_lr = 1.6e-2;
        cfg.warmup_epochs = 5;
        cfg
    }

    pub fn group_size(&self) -> usize {
        match self.encoder.token_kind {
            TokenKind::SpectralBand { group_size, .. } => group_size,
            TokenKind::SpatialPatch { .. } => 0,
        }
    }

    pub fn groups(&self) -> usize {
        self.encoder.token_kind.channels() / self.group_size().max(1)
    }

    pub fn lr(&self) -> f64 {
        scaled_lr(self.base_lr, self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let bad = |m: String| Err(Error::Parameter(m));
        if self.encoder.token_kind.is_spatial() {
            return bad("pixel-level pretraining needs a spectral encoder".into());
        }
        if self.decoder_blocks == 0 || self.decoder_blocks >= self.encoder.num_blocks {
            return bad(format!(
                "decoder depth {} must be at least 1 and below encoder depth {}",
                self.decoder_blocks, self.encoder.num_blocks
            ));
        }
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!(
                "decoder width {} not divisible into {} heads",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.decoder_mlp == 0 {
            return bad("decoder MLP width must be positive".into());
        }
        masked_count(self.groups(), self.mask_ratio)?;
        if self.epochs == 0 || self.batch_size == 0 || self.stride == 0 {
            return bad("epochs, batch size and stride must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0 && self.wd_start >= 0.0 && self.wd_end >= 0.0) {
            return bad("learning rates and weight decays must be non-negative".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        self.encoder.write_kv(kv, "encoder.");
        kv.set("pix.decoder_dim", self.decoder_dim);
        kv.set("pix.decoder_heads", self.decoder_heads);
        kv.set("pix.decoder_mlp", self.decoder_mlp);
        kv.set("pix.decoder_blocks", self.decoder_blocks);
        kv.set("pix.mask_ratio", self.mask_ratio);
        kv.set("pix.loss_mode", self.loss_mode);
        kv.set("pix.epochs", self.epochs);
        kv.set("pix.batch_size", self.batch_size);
        kv.set("pix.base_lr", self.base_lr);
        kv.set("pix.min_lr", self.min_lr);
        kv.set("pix.warmup_epochs", self.warmup_epochs);
        kv.set("pix.wd_start", self.wd_start);
        kv.set("pix.wd_end", self.wd_end);
        kv.set("pix.stride", self.stride);
        kv.set("pix.seed", self.seed);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let encoder = EncoderConfig::from_kv(kv, "encoder.")?;
        let d = PixConfig::new(encoder.token_kind.channels());
        let cfg = PixConfig {
            encoder,
            decoder_dim: kv.parse_or("pix.decoder_dim", encoder.embed_dim / 2)?,
            decoder_heads: kv.parse_or("pix.decoder_heads", d.decoder_heads)?,
            decoder_mlp: kv.parse_or("pix.decoder_mlp", encoder.embed_dim)?,
            decoder_blocks: kv.parse_or("pix.decoder_blocks", d.decoder_blocks)?,
            mask_ratio: kv.parse_or("pix.mask_ratio", d.mask_ratio)?,
            loss_mode: kv.parse_or("pix.loss_mode", d.loss_mode)?,
            epochs: kv.parse_or("pix.epochs", d.epochs)?,
            batch_size: kv.parse_or("pix.batch_size", d.batch_size)?,
            base_lr: kv.parse_or("pix.base_lr", d.base_lr)?,
            min_lr: kv.parse_or("pix.min_lr", d.min_lr)?,
            warmup_epochs: kv.parse_or("pix.warmup_epochs", d.warmup_epochs)?,
            wd_start: kv.parse_or("pix.wd_start", d.wd_start)?,
            wd_end: kv.parse_or("pix.wd_end", d.wd_end)?,
            stride: kv.parse_or("pix.stride", d.stride)?,
            seed: kv.parse_or("pix.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Encoder plus decoder parameters and the input standardisation.
#[derive(Clone, Debug, PartialEq)]
pub struct PixModel {
    pub config: PixConfig,
    pub params: ParamSet,
    pub input_stats: BandStats,
}

impl PixModel {
    pub fn init<R: Rng + ?Sized>(config: PixConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderState::init(config.encoder, rng)?;
        let mut params = ParamSet::new();
        params.extend_prefixed("encoder.", &encoder.params)?;
        let (d, dd) = (config.encoder.embed_dim, config.decoder_dim);
        params.insert("decoder.adapter.w", Tensor::trunc_normal(&[d, dd], INIT_STD, rng))?;
        params.insert("decoder.adapter.b", Tensor::zeros(&[dd]))?;
        params.insert("decoder.mask_token", Tensor::trunc_normal(&[dd], INIT_STD, rng))?;
        for i in 0..config.decoder_blocks {
            init_block(&mut params, &format!("decoder.blocks.{i}."), dd, config.decoder_mlp, rng)?;
        }
        params.insert("decoder.head.w", Tensor::trunc_normal(&[dd, config.group_size()], INIT_STD, rng))?;
        params.insert("decoder.head.b", Tensor::zeros(&[config.group_size()]))?;
        Ok(PixModel {
            config,
            params,
            input_stats: encoder.input_stats,
        })
    }

    pub fn encoder(&self) -> Result<EncoderState> {
        Ok(EncoderState {
            config: self.config.encoder,
            params: self.params.with_prefix_stripped("encoder.")?,
            input_stats: self.input_stats.clone(),
        })
    }

    fn check_plan(&self, plan: &MaskPlan) -> Result<()> {
        if plan.units != self.config.groups() || plan.group_size != self.config.group_size() {
            return Err(Error::Contract(format!(
                "plan over {} groups of {} does not match the model's {} groups of {}",
                plan.units,
                plan.group_size,
                self.config.groups(),
                self.config.group_size()
            )));
        }
        Ok(())
    }

    /// Encodes only the visible groups of `batch` standardised profiles;
    /// returns `[B x visible x d]`.
    pub fn encode_visible(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        profiles: &[f32],
        batch: usize,
        plan: &MaskPlan,
    ) -> Result<Var> {
        self.check_plan(plan)?;
        let tokens = TokenBatch::spectral(&self.config.encoder, profiles, batch, Some(&plan.visible))?;
        Ok(encoder_forward(&self.config.encoder, tape, &tokens, &bound.scoped("encoder."))?.tokens)
    }

    /// Full-length reconstruction `[B x C]` from visible latents.
    pub fn decode_full(&self, tape: &mut Tape, bound: &Bound, latents: Var, plan: &MaskPlan) -> Result<Var> {
        self.check_plan(plan)?;
        let s = tape.shape(latents).to_vec();
        if s.len() != 3 || s[1] != plan.visible.len() {
            return Err(Error::Contract(format!(
                "latents {s:?} do not hold the plan's {} visible groups",
                plan.visible.len()
            )));
        }
        let b = bound.scoped("decoder.");
        let x = tape.linear(latents, b.get("adapter.w")?, Some(b.get("adapter.b")?))?;
        let mut slots = vec![None; plan.units];
        for (j, &g) in plan.visible.iter().enumerate() {
            slots[g] = Some(j);
        }
        let x = tape.scatter_tokens(x, b.get("mask_token")?, &slots)?;
        let all: Vec<usize> = (0..plan.units).collect();
        let pos = tape.constant(Tensor::new(
            vec![plan.units, self.config.decoder_dim],
            sinusoid_1d(&all, self.config.decoder_dim),
        )?);
        let mut x = tape.add(x, pos)?;
        for i in 0..self.config.decoder_blocks {
            let block = BlockVars::from_bound(&b, &format!("blocks.{i}."))?;
            x = encoder_block(tape, x, &block, self.config.decoder_heads)?.0;
        }
        let y = tape.linear(x, b.get("head.w")?, Some(b.get("head.b")?))?;
        tape.reshape(y, &[s[0], plan.channels()])
    }

    /// Inference-only reconstruction of standardised profiles.
    pub fn reconstruct(&self, profiles: &[f32], batch: usize, plan: &MaskPlan) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let latents = self.encode_visible(&mut tape, &bound, profiles, batch, plan)?;
        let out = self.decode_full(&mut tape, &bound, latents, plan)?;
        Ok(tape.tensor(out))
    }
}

/// Mean squared error over the bands selected by `mode`.
pub fn reconstruction_loss(tape: &mut Tape, pred: Var, target: &Tensor, plan: &MaskPlan, mode: LossMode) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s != target.shape() || s.len() != 2 || s[1] != plan.channels() {
        return Err(Error::dim(
            "reconstruction_loss",
            format!("prediction {s:?}, target {:?}, plan over {} bands", target.shape(), plan.channels()),
        ));
    }
    let w = plan.band_weights(mode);
    let count = w.iter().filter(|&&v| v > 0.0).count() * s[0];
    let t = tape.constant(target.clone());
    let w = tape.constant(Tensor::new(vec![s[1]], w)?);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.mul(sq, w)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / count as f32)
}

/// Plain-float form of [`reconstruction_loss`].
pub fn masked_mse(pred: &[f32], target: &[f32], plan: &MaskPlan, mode: LossMode) -> f64 {
    let c = plan.channels();
    let w = plan.band_weights(mode);
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        if w[i % c] > 0.0 {
            sum += ((p - t) as f64).powi(2);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixEpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub ratio: f64,
}

impl PixEpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,loss,lr,wd,ratio";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.loss, self.lr, self.wd, self.ratio)
    }
}

/// Stateful trainer over a fixed, standardised profile set.
#[derive(Clone, Debug)]
pub struct PixTrainer {
    pub model: PixModel,
    pub optimizer: AdamWState,
    pub epoch: usize,
    pub step: usize,
    pub steps_per_epoch: usize,
    lr: Schedule,
    wd: Schedule,
    profiles: SpectralBatch,
}

impl PixTrainer {
    /// Fresh run on raw profiles; band statistics are fitted on them.
    pub fn new(config: PixConfig, profiles: &SpectralBatch) -> Result<Self> {
        config.validate()?;
        if profiles.is_empty() {
            return Err(Error::Contract("pixel-level pretraining needs at least one profile".into()));
        }
        let mut model = PixModel::init(config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        model.input_stats = BandStats::fit(profiles)?;
        Self::assemble(model, profiles)
    }

    fn assemble(model: PixModel, raw: &SpectralBatch) -> Result<Self> {
        let c = model.config;
        if raw.channels != c.encoder.token_kind.channels() {
            return Err(Error::Contract(format!(
                "profiles have {} bands, encoder expects {}",
                raw.channels,
                c.encoder.token_kind.channels()
            )));
        }
        let steps_per_epoch = raw.len().div_ceil(c.batch_size);
        let total = c.epochs * steps_per_epoch;
        let warmup = (c.warmup_epochs * steps_per_epoch).min(total);
        let mut profiles = raw.clone();
        model.input_stats.normalize(&mut profiles.profiles);
        Ok(PixTrainer {
            optimizer: AdamWState::new(&model.params),
            epoch: 0,
            step: 0,
            steps_per_epoch,
            lr: Schedule::warmup_cosine(c.lr(), c.min_lr, warmup, total)?,
            wd: Schedule::cosine_range(c.wd_start, c.wd_end, total)?,
            profiles,
            model,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.model.config.epochs
    }

    /// One epoch; shuffle and masks derive from `(seed, epoch)`.
    pub fn run_epoch(&mut self) -> Result<PixEpochRecord> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let cfg = self.model.config;
        let c = self.profiles.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, self.epoch as u64));
        let mut order: Vec<usize> = (0..self.profiles.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr, mut wd) = (0.0f64, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let plan = sample_group_mask(cfg.groups(), cfg.group_size(), cfg.mask_ratio, &mut rng)?;
            let mut batch = Vec::with_capacity(chunk.len() * c);
            for &i in chunk {
                batch.extend_from_slice(self.profiles.profile(i));
            }
            let target = Tensor::new(vec![chunk.len(), c], batch)?;
            let mut tape = Tape::new();
            let bound = self.model.params.bind(&mut tape, true);
            let latents = self.model.encode_visible(&mut tape, &bound, target.data(), chunk.len(), &plan)?;
            let pred = self.model.decode_full(&mut tape, &bound, latents, &plan)?;
            let loss = reconstruction_loss(&mut tape, pred, &target, &plan, cfg.loss_mode)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite reconstruction loss at epoch {} step {}",
                    self.epoch, self.step
                )));
            }
            let mut grads = tape.backward(loss)?;
            self.model.params.store_grads(&bound, &mut grads)?;
            lr = self.lr.at(self.step)?;
            wd = self.wd.at(self.step)?;
            self.optimizer.step(&mut self.model.params, lr as f32, wd as f32)?;
            self.model.params.zero_grads();
            loss_sum += value as f64;
            self.step += 1;
        }
        let record = PixEpochRecord {
            epoch: self.epoch,
            step: self.step,
            loss: loss_sum / self.steps_per_epoch as f64,
            lr,
            wd,
            ratio: cfg.mask_ratio,
        };
        self.epoch += 1;
        Ok(record)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut header = KeyValues::new();
        self.model.config.write_kv(&mut header);
        self.model.input_stats.write_kv(&mut header, "encoder.input_");
        header.set("task", "pix");
        header.set("train.epoch", self.epoch);
        header.set("train.step", self.step);
        header.set("train.opt_step", self.optimizer.step);
        let mut params = ParamSet::new();
        params.extend_prefixed("model.", &self.model.params)?;
        save_moments(&mut params, &self.model.params, &self.optimizer)?;
        Ok(Checkpoint::new(header, params))
    }

    /// Restores a run saved by [`PixTrainer::to_checkpoint`] over the same
    /// raw profiles.
    pub fn from_checkpoint(ck: &Checkpoint, profiles: &SpectralBatch) -> Result<Self> {
        let config = PixConfig::from_kv(&ck.header).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut model = PixModel::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = ck.params.with_prefix_stripped("model.")?;
        if !params.same_layout(&model.params) {
            return Err(Error::Checkpoint("model parameters do not match the config".into()));
        }
        model.params = params;
        model.input_stats = BandStats::from_kv(&ck.header, "encoder.input_")?
            .ok_or_else(|| Error::Checkpoint("missing input statistics".into()))?;
        let mut trainer = Self::assemble(model, profiles)?;
        let steps: usize = ck.header.parse_value("train.step")?;
        let epoch: usize = ck.header.parse_value("train.epoch")?;
        if steps != epoch * trainer.steps_per_epoch {
            return Err(Error::Checkpoint("profile count differs from the checkpointed run".into()));
        }
        let opt_step = ck.header.parse_value("train.opt_step")?;
        load_moments(&ck.params, &trainer.model.params, &mut trainer.optimizer, opt_step)?;
        trainer.epoch = epoch;
        trainer.step = steps;
        Ok(trainer)
    }
}

/// Trains from scratch; returns the model and per-epoch trace.
pub fn train_pixssl(profiles: &SpectralBatch, config: PixConfig) -> Result<(PixModel, Vec<PixEpochRecord>)> {
    let mut trainer = PixTrainer::new(config, profiles)?;
    let mut trace = Vec::with_capacity(config.epochs);
    while !trainer.is_done() {
        trace.push(trainer.run_epoch()?);
    }
    Ok((trainer.model, trace))
}

/// Held-out reconstruction error of `model` against the per-band-mean
/// predictor, both on the masked bands of the same plans.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionEval {
    pub model_mse: f64,
    pub mean_predictor_mse: f64,
}

/// Evaluates on raw `profiles` with `n_plans` random plans at the model's
/// ratio. The mean predictor outputs the training band means, which are
/// zero after standardisation.
pub fn evaluate_reconstruction(
    model: &PixModel,
    profiles: &SpectralBatch,
    n_plans: usize,
    seed: u64,
) -> Result<ReconstructionEval> {
    let cfg = model.config;
    let mut data = profiles.profiles.clone();
    model.input_stats.normalize(&mut data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut m, mut base) = (0.0, 0.0);
    for _ in 0..n_plans {
        let plan = sample_group_mask(cfg.groups(), cfg.group_size(), cfg.mask_ratio, &mut rng)?;
        let pred = model.reconstruct(&data, profiles.len(), &plan)?;
        m += masked_mse(pred.data(), &data, &plan, LossMode::MaskedOnly);
        base += masked_mse(&vec![0.0; data.len()], &data, &plan, LossMode::MaskedOnly);
    }
    Ok(ReconstructionEval {
        model_mse: m / n_plans as f64,
        mean_predictor_mse: base / n_plans as f64,
    })
}

/// Downstream score of one pretraining run in a masking-ratio sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub metric: &'static str,
    pub value: f64,
    pub report: MetricsReport,
}

pub const SWEEP_CSV_HEADER: &str = "ratio,probe_metric,probe_value";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.ratio, r.metric, r.value));
    }
    out
}

/// Pretrains once per ratio with the same seed and profiles, then probes
/// each encoder on the same split. The score is R² for regression heads and
/// macro F1 for multi-label heads.
pub fn masking_ratio_sweep(
    profiles: &SpectralBatch,
    base: PixConfig,
    ratios: &[f64],
    train: &LabeledSet,
    val: &LabeledSet,
    probe: &ProbeConfig,
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(Error::Parameter("masking-ratio sweep needs at least one ratio".into()));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let config = PixConfig { mask_ratio: ratio, ..base };
        let (model, _) = train_pixssl(profiles, config)?;
        let report = run_probe(&model.encoder()?, train, val, probe)?.report;
        let (metric, value) = match probe.head {
            HeadKind::Regression(_) => ("r2", report.r2.unwrap_or(f64::NAN)),
            HeadKind::MultiLabel(_) => ("f1_macro", report.f1_macro),
        };
        rows.push(SweepRow {
            ratio,
            metric,
            value,
            report,
        });
    }
    Ok(rows)
}
