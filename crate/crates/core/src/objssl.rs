//! Object-level self-distillation: a student encoder and projection head
//! learn to match a momentum teacher's sharpened, centred prototype
//! distribution across global, local and spectral views of one cube.
//!
//! Parameters of one network live in a single [`ParamSet`] with names
//! `encoder.*` and `head.*`; the student and teacher sets share names and
//! shapes. Only the student is touched by the optimizer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_viewset, mix_seed, resize, ViewConfig, ViewSet};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{BandStats, SpectralCube};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::optim::AdamWState;
use crate::params::{Bound, ParamSet};
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::transformer::{encoder_forward, EncoderConfig, EncoderState, TokenBatch, TokenKind, INIT_STD};

/// MLP `d -> hidden -> hidden -> bottleneck`, L2-normalised, followed by a
/// cosine-similarity layer against `prototypes` unit vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionHead {
    pub input_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl ProjectionHead {
    pub fn new(input_dim: usize) -> Self {
        ProjectionHead {
            input_dim,
            hidden: 256,
            bottleneck: 64,
            prototypes: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.bottleneck == 0 || self.prototypes < 2 {
            return Err(Error::Parameter(format!("degenerate projection head {self:?}")));
        }
        Ok(())
    }

    /// Adds `fc{1,2,3}.{w,b}` and `prototypes` under `prefix`.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, prefix: &str, rng: &mut R) -> Result<()> {
        self.validate()?;
        let dims = [self.input_dim, self.hidden, self.hidden, self.bottleneck];
        for (i, pair) in dims.windows(2).enumerate() {
            params.insert(format!("{prefix}fc{}.w", i + 1), Tensor::trunc_normal(&[pair[0], pair[1]], INIT_STD, rng))?;
            params.insert(format!("{prefix}fc{}.b", i + 1), Tensor::zeros(&[pair[1]]))?;
        }
        params.insert(
            format!("{prefix}prototypes"),
            Tensor::trunc_normal(&[self.prototypes, self.bottleneck], INIT_STD, rng),
        )?;
        Ok(())
    }

    /// Prototype logits `[n x K]` in `[-1, 1]` for summaries `x [n x d]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &Bound) -> Result<Var> {
        let n = tape.shape(x)[0];
        let mut h = x;
        for i in 1..=3 {
            h = tape.linear(h, bound.get(&format!("fc{i}.w"))?, Some(bound.get(&format!("fc{i}.b"))?))?;
            if i < 3 {
                h = tape.gelu(h)?;
            }
        }
        let z = tape.l2_normalize(h)?;
        let protos = tape.l2_normalize(bound.get("prototypes")?)?;
        let z = tape.reshape(z, &[1, n, self.bottleneck])?;
        let protos = tape.reshape(protos, &[1, self.prototypes, self.bottleneck])?;
        let logits = tape.bmm(z, protos, true)?;
        tape.reshape(logits, &[n, self.prototypes])
    }

    fn write_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}hidden"), self.hidden);
        kv.set(format!("{prefix}bottleneck"), self.bottleneck);
        kv.set(format!("{prefix}prototypes"), self.prototypes);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjConfig {
    pub encoder: EncoderConfig,
    pub head: ProjectionHead,
    pub views: ViewConfig,
    pub tau_s: f32,
    pub tau_t: f32,
    pub center_momentum: f32,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    /// Cubes in the fixed batch used for the spread diagnostic.
    pub probe_size: usize,
    pub seed: u64,
}

impl ObjConfig {
    /// Defaults for `channels`-band cubes at full view size.
    pub fn new(channels: usize) -> Self {
        let encoder = EncoderConfig::spatial(channels);
        ObjConfig {
            encoder,
            head: ProjectionHead::new(encoder.embed_dim),
            views: ViewConfig::default(),
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            lambda_start: 0.96,
            lambda_end: 1.0,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 1e-6,
            warmup_epochs: 10,
            wd_start: 0.04,
            wd_end: 0.4,
            probe_size: 16,
            seed: 0,
        }
    }

    /// Small preset for 24x24 cubes that trains in seconds on one core.
    pub fn desk(channels: usize) -> Self {
        let mut cfg = ObjConfig::new(channels);
        cfg.encoder = EncoderConfig {
            embed_dim: 32,
            num_heads: 4,
            mlp_hidden: 64,
            num_blocks: 2,
            token_kind: TokenKind::SpatialPatch { patch_size: 4, channels },
            max_tokens: 256,
        };
        cfg.head = ProjectionHead::new(32);
        cfg.views = ViewConfig::scaled(24, 12);
        cfg.epochs = 50;
        cfg.batch_size = 16;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.views.validate()?;
        let bad = |m: String| Err(Error::Parameter(m));
        if !self.encoder.token_kind.is_spatial() {
            return bad("object-level pretraining needs a spatial encoder".into());
        }
        if self.head.input_dim != self.encoder.embed_dim {
            return bad(format!(
                "head input {} does not match embed dim {}",
                self.head.input_dim, self.encoder.embed_dim
            ));
        }
        if !(self.tau_t > 0.0 && self.tau_t < self.tau_s && self.tau_s.is_finite()) {
            return bad(format!("need 0 < tau_t < tau_s, got {} and {}", self.tau_t, self.tau_s));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return bad(format!("center momentum {} outside [0, 1]", self.center_momentum));
        }
        if !(0.0 <= self.lambda_start && self.lambda_start <= self.lambda_end && self.lambda_end <= 1.0) {
            return bad(format!("momentum range {}..{} invalid", self.lambda_start, self.lambda_end));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.probe_size < 2 {
            return bad("epochs and batch size must be positive and the probe batch at least 2".into());
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.wd_start >= 0.0 && self.wd_end >= 0.0) {
            return bad("learning rates and weight decays must be non-negative".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        self.encoder.write_kv(kv, "encoder.");
        self.head.write_kv(kv, "head.");
        let v = &self.views;
        kv.set("views.global_size", v.global_size);
        kv.set("views.local_size", v.local_size);
        kv.set("views.n_globals", v.n_globals);
        kv.set("views.n_locals", v.n_locals);
        kv.set("views.n_spectral", v.n_spectral);
        kv.set("views.global_min_scale", v.global_min_scale);
        kv.set("views.zoom_min", v.zoom_range.0);
        kv.set("views.zoom_max", v.zoom_range.1);
        kv.set("views.blur_sigma_max", v.blur_sigma_max);
        kv.set("views.noise_fraction", v.noise_fraction);
        kv.set("views.drop_min", v.drop_min);
        kv.set("views.drop_max", v.drop_max);
        kv.set("obj.tau_s", self.tau_s);
        kv.set("obj.tau_t", self.tau_t);
        kv.set("obj.center_momentum", self.center_momentum);
        kv.set("obj.lambda_start", self.lambda_start);
        kv.set("obj.lambda_end", self.lambda_end);
        kv.set("obj.epochs", self.epochs);
        kv.set("obj.batch_size", self.batch_size);
        kv.set("obj.lr", self.lr);
        kv.set("obj.min_lr", self.min_lr);
        kv.set("obj.warmup_epochs", self.warmup_epochs);
        kv.set("obj.wd_start", self.wd_start);
        kv.set("obj.wd_end", self.wd_end);
        kv.set("obj.probe_size", self.probe_size);
        kv.set("obj.seed", self.seed);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let encoder = EncoderConfig::from_kv(kv, "encoder.")?;
        let d = ObjConfig::new(encoder.token_kind.channels());
        let dv = d.views;
        let views = ViewConfig {
            global_size: kv.parse_or("views.global_size", dv.global_size)?,
            local_size: kv.parse_or("views.local_size", dv.local_size)?,
            n_globals: kv.parse_or("views.n_globals", dv.n_globals)?,
            n_locals: kv.parse_or("views.n_locals", dv.n_locals)?,
            n_spectral: kv.parse_or("views.n_spectral", dv.n_spectral)?,
            global_min_scale: kv.parse_or("views.global_min_scale", dv.global_min_scale)?,
            zoom_range: (
                kv.parse_or("views.zoom_min", dv.zoom_range.0)?,
                kv.parse_or("views.zoom_max", dv.zoom_range.1)?,
            ),
            blur_sigma_max: kv.parse_or("views.blur_sigma_max", dv.blur_sigma_max)?,
            noise_fraction: kv.parse_or("views.noise_fraction", dv.noise_fraction)?,
            drop_min: kv.parse_or("views.drop_min", dv.drop_min)?,
            drop_max: kv.parse_or("views.drop_max", dv.drop_max)?,
        };
        let cfg = ObjConfig {
            encoder,
            head: ProjectionHead {
                input_dim: encoder.embed_dim,
                hidden: kv.parse_or("head.hidden", d.head.hidden)?,
                bottleneck: kv.parse_or("head.bottleneck", d.head.bottleneck)?,
                prototypes: kv.parse_or("head.prototypes", d.head.prototypes)?,
            },
            views,
            tau_s: kv.parse_or("obj.tau_s", d.tau_s)?,
            tau_t: kv.parse_or("obj.tau_t", d.tau_t)?,
            center_momentum: kv.parse_or("obj.center_momentum", d.center_momentum)?,
            lambda_start: kv.parse_or("obj.lambda_start", d.lambda_start)?,
            lambda_end: kv.parse_or("obj.lambda_end", d.lambda_end)?,
            epochs: kv.parse_or("obj.epochs", d.epochs)?,
            batch_size: kv.parse_or("obj.batch_size", d.batch_size)?,
            lr: kv.parse_or("obj.lr", d.lr)?,
            min_lr: kv.parse_or("obj.min_lr", d.min_lr)?,
            warmup_epochs: kv.parse_or("obj.warmup_epochs", d.warmup_epochs)?,
            wd_start: kv.parse_or("obj.wd_start", d.wd_start)?,
            wd_end: kv.parse_or("obj.wd_end", d.wd_end)?,
            probe_size: kv.parse_or("obj.probe_size", d.probe_size)?,
            seed: kv.parse_or("obj.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `softmax((logits - center) / tau)` row by row, computed outside any tape
/// so no gradient can reach the teacher.
pub fn teacher_probs(logits: &Tensor, center: &[f32], tau: f32) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != center.len() {
        return Err(Error::dim("teacher_probs", format!("logits {s:?} vs center of {}", center.len())));
    }
    let k = s[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let z: Vec<f64> = row.iter().zip(center).map(|(&l, &c)| (l - c) as f64 / tau as f64).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| (v / sum) as f32));
    }
    Tensor::new(s.to_vec(), out)
}

/// Mean cross-entropy over (teacher view, student view) pairs.
///
/// `teacher[g]` holds `[B x K]` probabilities of teacher view `g`;
/// `student[v]` holds `[B x K]` student logits of view `v`, and
/// `same_view[v] = Some(g)` marks student view `v` as the same crop as
/// teacher view `g`, which is excluded from pairing.
pub fn distill_pairs(
    tape: &mut Tape,
    teacher: &[Tensor],
    student: &[Var],
    same_view: &[Option<usize>],
    tau_s: f32,
) -> Result<Var> {
    if teacher.is_empty() || student.is_empty() {
        return Err(Error::Contract("distillation needs teacher and student views".into()));
    }
    if same_view.len() != student.len() {
        return Err(Error::Contract("one same-view entry per student view required".into()));
    }
    let shape = teacher[0].shape().to_vec();
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for (&s, &same) in student.iter().zip(same_view) {
        let mut target = vec![0.0f32; teacher[0].numel()];
        for (g, t) in teacher.iter().enumerate() {
            if t.shape() != shape.as_slice() || tape.shape(s) != shape.as_slice() {
                return Err(Error::dim("distill", "teacher and student views differ in shape"));
            }
            if same == Some(g) {
                continue;
            }
            target.iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b);
            pairs += 1;
        }
        let logp = tape.log_softmax(s, tau_s)?;
        let target = tape.constant(Tensor::new(shape.clone(), target)?);
        let term = tape.mul(logp, target)?;
        let term = tape.sum(term)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    if pairs == 0 {
        return Err(Error::Contract("no (teacher, student) pair with distinct views".into()));
    }
    tape.scale(total.expect("student views are non-empty"), -1.0 / (pairs * shape[0]) as f32)
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, clamped into the
/// closed interval between the two old values so rounding cannot leave it.
pub fn momentum_update(teacher: &mut ParamSet, student: &ParamSet, lambda: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::Contract("teacher and student parameter layouts differ".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("momentum {lambda} outside [0, 1]")));
    }
    let mix = (1.0 - lambda) as f32;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            let (lo, hi) = if *a <= b { (*a, b) } else { (b, *a) };
            *a = (*a + mix * (b - *a)).clamp(lo, hi);
        }
    }
    Ok(())
}

/// `center <- m * center + (1 - m) * mean_rows(logits)`.
pub fn update_center(center: &mut [f32], logits: &Tensor, momentum: f32) -> Result<()> {
    let s = logits.shape();
    if s.len() != 2 || s[0] == 0 || s[1] != center.len() {
        return Err(Error::dim("update_center", format!("logits {s:?} vs center of {}", center.len())));
    }
    let mut mean = vec![0.0f64; s[1]];
    for row in logits.data().chunks(s[1]) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    for (c, m) in center.iter_mut().zip(mean) {
        *c = momentum * *c + (1.0 - momentum) * (m / s[0] as f64) as f32;
    }
    Ok(())
}

/// Largest probability in any row.
pub fn max_probability(probs: &Tensor) -> f32 {
    probs.data().iter().cloned().fold(0.0, f32::max)
}

/// Largest entry of the row-averaged distribution of `probs [n x K]`.
pub fn marginal_max(probs: &Tensor) -> f32 {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let mut mean = vec![0.0f64; k];
    for row in probs.data().chunks(k) {
        mean.iter_mut().zip(row).for_each(|(m, &p)| *m += p as f64);
    }
    mean.into_iter().fold(0.0, f64::max) as f32 / n as f32
}

/// Mean pairwise Euclidean distance between the rows of `x [n x d]`.
pub fn representation_spread(x: &Tensor) -> f64 {
    let n = x.shape()[0];
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dist: f64 = x.row(i)
                .iter()
                .zip(x.row(j))
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            sum += dist.sqrt();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Teacher output of one loss evaluation.
#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub loss: Var,
    /// Raw teacher logits of every global view, `[G*B x K]`.
    pub teacher_logits: Tensor,
    /// Largest probability of any single teacher distribution.
    pub teacher_max_prob: f32,
    /// Largest entry of the batch-averaged teacher distribution; near one
    /// only when every input lands on the same prototype.
    pub teacher_marginal_max: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub config: ObjConfig,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub center: Vec<f32>,
    pub lambda: Schedule,
    /// Standardisation of raw cubes, fitted on the training set.
    pub input_stats: BandStats,
}

impl DistillState {
    /// Fresh student; the teacher starts as an exact copy. `total_steps` is
    /// the number of optimizer steps the momentum schedule spans.
    pub fn new<R: Rng + ?Sized>(config: ObjConfig, total_steps: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderState::init(config.encoder, rng)?;
        let mut student = ParamSet::new();
        student.extend_prefixed("encoder.", &encoder.params)?;
        config.head.init(&mut student, "head.", rng)?;
        let lambda = Schedule::cosine_range(config.lambda_start, config.lambda_end, total_steps.saturating_sub(1))?;
        Ok(DistillState {
            config,
            teacher: student.clone(),
            student,
            center: vec![0.0; config.head.prototypes],
            lambda,
            input_stats: BandStats::identity(config.encoder.token_kind.channels()),
        })
    }

    /// Encoder and head forward for same-sized `views`; logits `[n x K]`.
    pub fn network_forward(&self, tape: &mut Tape, bound: &Bound, views: &[&SpectralCube]) -> Result<Var> {
        let tokens = TokenBatch::spatial(&self.config.encoder, views)?;
        let enc = encoder_forward(&self.config.encoder, tape, &tokens, &bound.scoped("encoder."))?;
        self.config.head.forward(tape, enc.summary, &bound.scoped("head."))
    }

    pub fn teacher_logits(&self, views: &[&SpectralCube]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.teacher.bind(&mut tape, false);
        let logits = self.network_forward(&mut tape, &bound, views)?;
        Ok(tape.tensor(logits))
    }

    /// Centred, sharpened teacher distribution `[n x K]` for global views.
    pub fn teacher_distribution(&self, views: &[&SpectralCube]) -> Result<Tensor> {
        teacher_probs(&self.teacher_logits(views)?, &self.center, self.config.tau_t)
    }

    /// Loss over a batch of view sets. The teacher sees only the global
    /// views; the student sees every view. `bound` holds the student.
    pub fn distill_loss(&self, tape: &mut Tape, bound: &Bound, sets: &[ViewSet]) -> Result<DistillOutput> {
        let first = sets.first().ok_or_else(|| Error::Contract("empty batch of view sets".into()))?;
        let (g, l, s) = (first.global_views.len(), first.local_views.len(), first.spectral_views.len());
        if g == 0 || g + l + s < 2 {
            return Err(Error::Contract("a view set needs a global view and at least one other view".into()));
        }
        if sets.iter().any(|v| (v.global_views.len(), v.local_views.len(), v.spectral_views.len()) != (g, l, s)) {
            return Err(Error::Contract("view sets in a batch must have the same structure".into()));
        }
        let b = sets.len();
        let k = self.config.head.prototypes;
        let gather = |pick: &dyn Fn(&ViewSet) -> &Vec<SpectralCube>, count: usize| -> Vec<&SpectralCube> {
            (0..count).flat_map(|i| sets.iter().map(move |set| &pick(set)[i])).collect()
        };
        let globals = gather(&|v| &v.global_views, g);
        let locals = gather(&|v| &v.local_views, l);
        let spectral = gather(&|v| &v.spectral_views, s);

        let teacher_logits = self.teacher_logits(&globals)?;
        let probs = teacher_probs(&teacher_logits, &self.center, self.config.tau_t)?;
        let teacher: Vec<Tensor> = (0..g)
            .map(|i| Tensor::new(vec![b, k], probs.data()[i * b * k..(i + 1) * b * k].to_vec()))
            .collect::<Result<_>>()?;

        // Globals and spectral views share a size and go through one pass.
        let mut wide = globals.clone();
        wide.extend(&spectral);
        let wide_logits = self.network_forward(tape, bound, &wide)?;
        let mut student = Vec::with_capacity(g + l + s);
        let mut same_view = Vec::with_capacity(g + l + s);
        for i in 0..g + s {
            student.push(slice_rows(tape, wide_logits, i * b, b)?);
            same_view.push((i < g).then_some(i));
        }
        if l > 0 {
            let local_logits = self.network_forward(tape, bound, &locals)?;
            for i in 0..l {
                student.push(slice_rows(tape, local_logits, i * b, b)?);
                same_view.push(None);
            }
        }
        let loss = distill_pairs(tape, &teacher, &student, &same_view, self.config.tau_s)?;
        Ok(DistillOutput {
            loss,
            teacher_max_prob: max_probability(&probs),
            teacher_marginal_max: marginal_max(&probs),
            teacher_logits,
        })
    }

    /// Teacher EMA at optimizer step `step`; returns the momentum used.
    pub fn momentum_update(&mut self, step: usize) -> Result<f64> {
        let lambda = self.lambda.at(step.min(self.lambda.total_steps))?;
        momentum_update(&mut self.teacher, &self.student, lambda)?;
        Ok(lambda)
    }

    pub fn update_center(&mut self, teacher_logits: &Tensor) -> Result<()> {
        update_center(&mut self.center, teacher_logits, self.config.center_momentum)
    }

    /// Sets the center to the mean teacher logits of `sets`' global views,
    /// so the first steps are not dominated by an arbitrary zero center.
    pub fn warm_start_center(&mut self, sets: &[ViewSet]) -> Result<()> {
        let globals: Vec<&SpectralCube> = sets.iter().flat_map(|s| &s.global_views).collect();
        if globals.is_empty() {
            return Err(Error::Contract("no global views to initialise the center".into()));
        }
        let logits = self.teacher_logits(&globals)?;
        update_center(&mut self.center, &logits, 0.0)
    }

    pub fn student_encoder(&self) -> Result<EncoderState> {
        Ok(EncoderState {
            config: self.config.encoder,
            params: self.student.with_prefix_stripped("encoder.")?,
            input_stats: self.input_stats.clone(),
        })
    }
}

/// Rows `start..start+n` of a `[N x K]` variable, as a differentiable op.
fn slice_rows(tape: &mut Tape, x: Var, start: usize, n: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let rows = s[0];
    if start == 0 && n == rows {
        return Ok(x);
    }
    // A selection matrix keeps this within the tape's existing ops.
    let mut sel = vec![0.0f32; n * rows];
    for i in 0..n {
        sel[i * rows + start + i] = 1.0;
    }
    let sel = tape.constant(Tensor::new(vec![n, rows], sel)?);
    tape.matmul(sel, x)
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjEpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss: f64,
    pub spread: f64,
    pub lr: f64,
    pub lambda: f64,
    pub wd: f64,
    /// Largest per-input teacher probability seen during the epoch.
    pub teacher_max_prob: f64,
    /// Largest entry of any step's batch-averaged teacher distribution.
    pub teacher_marginal_max: f64,
}

impl ObjEpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,loss,spread,lr,λ,wd,teacher_max_prob,teacher_marginal_max";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.spread,
            self.lr,
            self.lambda,
            self.wd,
            self.teacher_max_prob,
            self.teacher_marginal_max
        )
    }
}

/// Stateful trainer; one call to [`ObjTrainer::run_epoch`] per epoch. It
/// owns a standardised copy of the training cubes.
#[derive(Clone, Debug)]
pub struct ObjTrainer {
    pub state: DistillState,
    pub optimizer: AdamWState,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
    pub steps_per_epoch: usize,
    lr: Schedule,
    wd: Schedule,
    cubes: Vec<SpectralCube>,
    probe: Vec<SpectralCube>,
    /// Spread of the untrained student on the probe batch.
    pub initial_spread: f64,
}

impl ObjTrainer {
    /// Fresh run on raw `cubes`; band statistics are fitted on them.
    pub fn new(config: ObjConfig, cubes: &[SpectralCube]) -> Result<Self> {
        config.validate()?;
        if cubes.is_empty() {
            return Err(Error::Contract("object-level pretraining needs at least one cube".into()));
        }
        let steps_per_epoch = cubes.len().div_ceil(config.batch_size);
        let total = config.epochs * steps_per_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut state = DistillState::new(config, total, &mut rng)?;
        state.input_stats = BandStats::fit_cubes(cubes)?;
        Self::assemble(state, cubes, steps_per_epoch)
    }

    fn assemble(state: DistillState, raw: &[SpectralCube], steps_per_epoch: usize) -> Result<Self> {
        let c = state.config;
        let total = c.epochs * steps_per_epoch;
        let warmup = (c.warmup_epochs * steps_per_epoch).min(total);
        let cubes = raw
            .iter()
            .map(|cube| state.input_stats.normalize_cube(cube))
            .collect::<Result<Vec<_>>>()?;
        let probe = cubes
            .iter()
            .take(c.probe_size)
            .map(|cube| resize(cube, c.views.global_size, c.views.global_size))
            .collect::<Result<Vec<_>>>()?;
        let mut trainer = ObjTrainer {
            optimizer: AdamWState::new(&state.student),
            epoch: 0,
            step: 0,
            steps_per_epoch,
            lr: Schedule::warmup_cosine(c.lr, c.min_lr, warmup, total)?,
            wd: Schedule::cosine_range(c.wd_start, c.wd_end, total)?,
            cubes,
            probe,
            initial_spread: 0.0,
            state,
        };
        trainer.initial_spread = trainer.spread()?;
        Ok(trainer)
    }

    pub fn total_steps(&self) -> usize {
        self.state.config.epochs * self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.state.config.epochs
    }

    /// Spread of the student's summary vectors over the probe batch.
    pub fn spread(&self) -> Result<f64> {
        let encoder = self.state.student_encoder()?;
        let views: Vec<&SpectralCube> = self.probe.iter().collect();
        let summary = encoder.represent(&TokenBatch::spatial(&encoder.config, &views)?)?;
        Ok(representation_spread(&summary))
    }

    /// Runs one epoch. The shuffle and every view seed derive from
    /// `(seed, epoch)`, so a resumed run replays exactly.
    pub fn run_epoch(&mut self) -> Result<ObjEpochRecord> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let cfg = self.state.config;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, self.epoch as u64));
        let mut order: Vec<usize> = (0..self.cubes.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut max_prob, mut marginal) = (0.0f64, 0.0f32, 0.0f32);
        let (mut lr, mut wd, mut lambda) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let sets = chunk
                .iter()
                .map(|&i| make_viewset(&self.cubes[i], &cfg.views, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            if self.step == 0 {
                self.state.warm_start_center(&sets)?;
            }
            let mut tape = Tape::new();
            let bound = self.state.student.bind(&mut tape, true);
            let out = self.state.distill_loss(&mut tape, &bound, &sets)?;
            let loss = tape.scalar(out.loss);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite distillation loss at epoch {} step {}",
                    self.epoch, self.step
                )));
            }
            let mut grads = tape.backward(out.loss)?;
            self.state.student.store_grads(&bound, &mut grads)?;
            lr = self.lr.at(self.step)?;
            wd = self.wd.at(self.step)?;
            self.optimizer.step(&mut self.state.student, lr as f32, wd as f32)?;
            self.state.student.zero_grads();
            lambda = self.state.momentum_update(self.step)?;
            self.state.update_center(&out.teacher_logits)?;
            loss_sum += loss as f64;
            max_prob = max_prob.max(out.teacher_max_prob);
            marginal = marginal.max(out.teacher_marginal_max);
            self.step += 1;
        }
        let record = ObjEpochRecord {
            epoch: self.epoch,
            step: self.step,
            loss: loss_sum / self.steps_per_epoch as f64,
            spread: self.spread()?,
            lr,
            lambda,
            wd,
            teacher_max_prob: max_prob as f64,
            teacher_marginal_max: marginal as f64,
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Full training state: student, teacher, center, optimizer moments,
    /// input statistics and counters.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut header = KeyValues::new();
        self.state.config.write_kv(&mut header);
        self.state.input_stats.write_kv(&mut header, "encoder.input_");
        header.set("task", "obj");
        header.set("train.epoch", self.epoch);
        header.set("train.step", self.step);
        header.set("train.steps_per_epoch", self.steps_per_epoch);
        header.set("train.opt_step", self.optimizer.step);
        let mut params = ParamSet::new();
        params.extend_prefixed("student.", &self.state.student)?;
        params.extend_prefixed("teacher.", &self.state.teacher)?;
        params.insert("center", Tensor::from_vec(self.state.center.clone())?)?;
        save_moments(&mut params, &self.state.student, &self.optimizer)?;
        Ok(Checkpoint::new(header, params))
    }

    /// Restores a run saved by [`ObjTrainer::to_checkpoint`] over the same
    /// raw cubes.
    pub fn from_checkpoint(ck: &Checkpoint, cubes: &[SpectralCube]) -> Result<Self> {
        let config = ObjConfig::from_kv(&ck.header).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let steps_per_epoch: usize = ck.header.parse_value("train.steps_per_epoch")?;
        if cubes.len().div_ceil(config.batch_size) != steps_per_epoch {
            return Err(Error::Checkpoint("dataset size differs from the checkpointed run".into()));
        }
        let total = config.epochs * steps_per_epoch;
        let mut reference = DistillState::new(config, total, &mut ChaCha8Rng::seed_from_u64(0))?;
        let student = ck.params.with_prefix_stripped("student.")?;
        let teacher = ck.params.with_prefix_stripped("teacher.")?;
        if !student.same_layout(&reference.student) || !teacher.same_layout(&reference.student) {
            return Err(Error::Checkpoint("network parameters do not match the config".into()));
        }
        let center = ck.params.require("center")?.data().to_vec();
        if center.len() != config.head.prototypes {
            return Err(Error::Checkpoint("center length does not match the prototype count".into()));
        }
        reference.input_stats = BandStats::from_kv(&ck.header, "encoder.input_")?
            .ok_or_else(|| Error::Checkpoint("missing input statistics".into()))?;
        reference.student = student;
        reference.teacher = teacher;
        reference.center = center;
        let mut trainer = Self::assemble(reference, cubes, steps_per_epoch)?;
        let opt_step = ck.header.parse_value("train.opt_step")?;
        load_moments(&ck.params, &trainer.state.student, &mut trainer.optimizer, opt_step)?;
        trainer.epoch = ck.header.parse_value("train.epoch")?;
        trainer.step = ck.header.parse_value("train.step")?;
        Ok(trainer)
    }
}

/// Writes optimizer moments as `opt.m.<name>` / `opt.v.<name>`.
pub(crate) fn save_moments(out: &mut ParamSet, params: &ParamSet, opt: &AdamWState) -> Result<()> {
    for (((name, t), m), v) in params.iter().zip(opt.first_moments()).zip(opt.second_moments()) {
        out.insert(format!("opt.m.{name}"), Tensor::new(t.shape().to_vec(), m.clone())?)?;
        out.insert(format!("opt.v.{name}"), Tensor::new(t.shape().to_vec(), v.clone())?)?;
    }
    Ok(())
}

pub(crate) fn load_moments(src: &ParamSet, params: &ParamSet, opt: &mut AdamWState, step: u64) -> Result<()> {
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for name in params.names() {
        m.push(src.require(&format!("opt.m.{name}"))?.data().to_vec());
        v.push(src.require(&format!("opt.v.{name}"))?.data().to_vec());
    }
    opt.set_moments(step, m, v)
}

/// Trains from scratch for the configured number of epochs.
pub fn train_objssl(cubes: &[SpectralCube], config: ObjConfig) -> Result<(EncoderState, Vec<ObjEpochRecord>)> {
    let mut trainer = ObjTrainer::new(config, cubes)?;
    let mut trace = Vec::with_capacity(config.epochs);
    while !trainer.is_done() {
        trace.push(trainer.run_epoch()?);
    }
    Ok((trainer.state.student_encoder()?, trace))
}
