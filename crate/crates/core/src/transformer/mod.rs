//! Transformer encoder shared by both pretext tasks.
//!
//! Each block is post-norm:
//!
//! ```text
//! S = LayerNorm(MSA(P) + P)
//! F = LayerNorm(S + Fc2(GELU(Fc1(S))))
//! ```
//!
//! Parameter names inside an [`EncoderState`]:
//! `embed.w`, `embed.b`, `summary` (spatial only) and, per block `i`,
//! `blocks.i.attn.{wq,wk,wv,wo}`, `blocks.i.ln1.{g,b}`,
//! `blocks.i.mlp.{fc1_w,fc1_b,fc2_w,fc2_b}`, `blocks.i.ln2.{g,b}`.

mod attention;
mod config;
mod tokens;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use attention::{multi_head, self_attention};
pub use config::{EncoderConfig, TokenKind};
pub use tokens::{sinusoid_1d, sinusoid_2d, TokenBatch};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{BandStats, SpectralCube};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f32 = 0.02;

/// Tape handles of one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

impl BlockVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let g = |n: &str| bound.get(&format!("{prefix}{n}"));
        Ok(BlockVars {
            wq: g("attn.wq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            wo: g("attn.wo")?,
            ln1_g: g("ln1.g")?,
            ln1_b: g("ln1.b")?,
            fc1_w: g("mlp.fc1_w")?,
            fc1_b: g("mlp.fc1_b")?,
            fc2_w: g("mlp.fc2_w")?,
            fc2_b: g("mlp.fc2_b")?,
            ln2_g: g("ln2.g")?,
            ln2_b: g("ln2.b")?,
        })
    }
}

/// Adds one block's parameters under `prefix`.
pub fn init_block<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}attn.{w}"), Tensor::trunc_normal(&[dim, dim], INIT_STD, rng))?;
    }
    params.insert(format!("{prefix}ln1.g"), Tensor::ones(&[dim]))?;
    params.insert(format!("{prefix}ln1.b"), Tensor::zeros(&[dim]))?;
    params.insert(format!("{prefix}mlp.fc1_w"), Tensor::trunc_normal(&[dim, hidden], INIT_STD, rng))?;
    params.insert(format!("{prefix}mlp.fc1_b"), Tensor::zeros(&[hidden]))?;
    params.insert(format!("{prefix}mlp.fc2_w"), Tensor::trunc_normal(&[hidden, dim], INIT_STD, rng))?;
    params.insert(format!("{prefix}mlp.fc2_b"), Tensor::zeros(&[dim]))?;
    params.insert(format!("{prefix}ln2.g"), Tensor::ones(&[dim]))?;
    params.insert(format!("{prefix}ln2.b"), Tensor::zeros(&[dim]))?;
    Ok(())
}

/// One post-norm block over `x [B x n x d]`. Returns the block output and
/// its attention weights `[B x h x n x n]`.
pub fn encoder_block(tape: &mut Tape, x: Var, block: &BlockVars, heads: usize) -> Result<(Var, Var)> {
    let (msa, attn) = multi_head(tape, x, block.wq, block.wk, block.wv, block.wo, heads)?;
    let res = tape.add(msa, x)?;
    let s = tape.layer_norm(res, block.ln1_g, block.ln1_b)?;
    let h = tape.linear(s, block.fc1_w, Some(block.fc1_b))?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, block.fc2_w, Some(block.fc2_b))?;
    let res = tape.add(s, h)?;
    let out = tape.layer_norm(res, block.ln2_g, block.ln2_b)?;
    Ok((out, attn))
}

/// Runs embedding and all blocks of an encoder with architecture `cfg`.
/// `bound` must hold the encoder's parameter names (see [`ParamSet::bind`]
/// and [`Bound::scoped`]).
pub fn encoder_forward(cfg: &EncoderConfig, tape: &mut Tape, tokens: &TokenBatch, bound: &Bound) -> Result<EncoderOutput> {
    if tokens.raw.shape()[2] != cfg.token_kind.token_dim() {
        return Err(Error::dim(
            "encode",
            format!("token width {} but encoder expects {}", tokens.raw.shape()[2], cfg.token_kind.token_dim()),
        ));
    }
    if tokens.summary != cfg.token_kind.is_spatial() {
        return Err(Error::Tokenization("token batch does not match the encoder's token kind".into()));
    }
    let n_total = tokens.len() + usize::from(tokens.summary);
    if n_total > cfg.max_tokens {
        return Err(Error::Tokenization(format!(
            "{n_total} tokens exceed the configured maximum {}",
            cfg.max_tokens
        )));
    }
    let raw = tape.constant(tokens.raw.clone());
    let mut x = tape.linear(raw, bound.get("embed.w")?, Some(bound.get("embed.b")?))?;
    let pos = tape.constant(tokens.positions.clone());
    x = tape.add(x, pos)?;
    if tokens.summary {
        x = tape.prepend_token(x, bound.get("summary")?)?;
    }
    let mut attention = Vec::with_capacity(cfg.num_blocks);
    for i in 0..cfg.num_blocks {
        let vars = BlockVars::from_bound(bound, &format!("blocks.{i}."))?;
        let (out, attn) = encoder_block(tape, x, &vars, cfg.num_heads)?;
        x = out;
        attention.push(attn);
    }
    let summary = if tokens.summary {
        tape.select_token(x, 0)?
    } else {
        tape.mean_tokens(x)?
    };
    Ok(EncoderOutput {
        tokens: x,
        summary,
        attention,
    })
}

/// Tape handles produced by [`EncoderState::forward`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// All token outputs `[B x n x d]`, summary token first in spatial mode.
    pub tokens: Var,
    /// Representation vector `[B x d]`: the summary token in spatial mode,
    /// the mean of the band tokens in spectral mode.
    pub summary: Var,
    /// Per-block attention weights `[B x h x n x n]`.
    pub attention: Vec<Var>,
}

/// Detached encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub tokens: Tensor,
    pub summary: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub params: ParamSet,
    /// Per-band standardisation applied to raw inputs before tokenization
    /// (see [`EncoderState::prepare_cube`]).
    pub input_stats: BandStats,
}

impl EncoderState {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamSet::new();
        // Xavier scale keeps the content term comparable to the unit-scale
        // sinusoidal positions.
        let fan_in = config.token_kind.token_dim();
        let xavier = (2.0 / (fan_in + d) as f32).sqrt();
        params.insert("embed.w", Tensor::trunc_normal(&[fan_in, d], xavier, rng))?;
        params.insert("embed.b", Tensor::zeros(&[d]))?;
        if config.token_kind.is_spatial() {
            params.insert("summary", Tensor::trunc_normal(&[d], INIT_STD, rng))?;
        }
        for i in 0..config.num_blocks {
            init_block(&mut params, &format!("blocks.{i}."), d, config.mlp_hidden, rng)?;
        }
        let input_stats = BandStats::identity(config.token_kind.channels());
        Ok(EncoderState { config, params, input_stats })
    }

    pub fn with_input_stats(mut self, stats: BandStats) -> Result<Self> {
        if stats.channels() != self.config.token_kind.channels() {
            return Err(Error::Contract(format!(
                "input statistics cover {} bands, encoder expects {}",
                stats.channels(),
                self.config.token_kind.channels()
            )));
        }
        self.input_stats = stats;
        Ok(self)
    }

    /// Standardises a raw cube the way this encoder was trained.
    pub fn prepare_cube(&self, cube: &SpectralCube) -> Result<SpectralCube> {
        self.input_stats.normalize_cube(cube)
    }

    /// Standardises raw row-major profiles in place.
    pub fn prepare_profiles(&self, profiles: &mut [f32]) {
        self.input_stats.normalize(profiles)
    }

    /// Runs embedding and all blocks; see [`encoder_forward`].
    pub fn forward(&self, tape: &mut Tape, tokens: &TokenBatch, bound: &Bound) -> Result<EncoderOutput> {
        encoder_forward(&self.config, tape, tokens, bound)
    }

    /// Inference-only forward pass.
    pub fn encode(&self, tokens: &TokenBatch) -> Result<Encoded> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, tokens, &bound)?;
        Ok(Encoded {
            tokens: tape.tensor(out.tokens),
            summary: tape.tensor(out.summary),
        })
    }

    /// Summary vectors `[B x d]` only.
    pub fn represent(&self, tokens: &TokenBatch) -> Result<Tensor> {
        Ok(self.encode(tokens)?.summary)
    }

    /// Attention weights of block `block_index`, `[B x h x n x n]`; each row
    /// sums to one.
    pub fn attention_maps(&self, tokens: &TokenBatch, block_index: usize) -> Result<Tensor> {
        if block_index >= self.config.num_blocks {
            return Err(Error::Parameter(format!(
                "block {block_index} out of range for {} blocks",
                self.config.num_blocks
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, tokens, &bound)?;
        Ok(tape.tensor(out.attention[block_index]))
    }

    pub fn write_header(&self, kv: &mut KeyValues, prefix: &str) {
        self.config.write_kv(kv, prefix);
        self.input_stats.write_kv(kv, &format!("{prefix}input_"));
    }

    /// Header holds the config under `encoder.`; parameters are stored under
    /// `encoder.` as well.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut header = KeyValues::new();
        self.write_header(&mut header, "encoder.");
        let mut params = ParamSet::new();
        params.extend_prefixed("encoder.", &self.params)?;
        Ok(Checkpoint::new(header, params))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = EncoderConfig::from_kv(&ck.header, "encoder.")
            .map_err(|e| Error::Checkpoint(format!("encoder config: {e}")))?;
        let params = ck.params.with_prefix_stripped("encoder.")?;
        let input_stats = BandStats::from_kv(&ck.header, "encoder.input_")
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .unwrap_or_else(|| BandStats::identity(config.token_kind.channels()));
        let state = EncoderState { config, params, input_stats };
        if state.input_stats.channels() != config.token_kind.channels() {
            return Err(Error::Checkpoint("input statistics do not match the band count".into()));
        }
        state.check_layout()?;
        Ok(state)
    }

    /// Verifies parameter names and shapes against the config.
    pub fn check_layout(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = EncoderState::init(self.config, &mut rng)?;
        if !reference.params.same_layout(&self.params) {
            return Err(Error::Checkpoint(
                "encoder parameters do not match the encoder config".into(),
            ));
        }
        Ok(())
    }
}

/// Attention of the summary token over the patches, for sample `sample` and
/// head `head`, laid out on the patch grid `[rows x cols]`.
pub fn summary_attention_grid(maps: &Tensor, tokens: &TokenBatch, sample: usize, head: usize) -> Result<Tensor> {
    let (rows, cols) = tokens
        .grid
        .filter(|_| tokens.summary)
        .ok_or_else(|| Error::Tokenization("attention grid needs spatial tokens".into()))?;
    let s = maps.shape();
    if s.len() != 4 || s[2] != rows * cols + 1 || s[3] != s[2] || sample >= s[0] || head >= s[1] {
        return Err(Error::dim("attention grid", format!("maps {s:?} do not match a {rows}x{cols} grid")));
    }
    let n = s[2];
    let start = ((sample * s[1] + head) * n) * n;
    Tensor::new(vec![rows, cols], maps.data()[start + 1..start + n].to_vec())
}
