//! Raw token extraction and sinusoidal positional embeddings.

use crate::data::SpectralCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::{EncoderConfig, TokenKind};

/// 1-D sinusoidal table: row `i` encodes `positions[i]` with
/// `sin(p / 10000^(2k/dim))` at column `2k` and the matching cosine at `2k+1`.
pub fn sinusoid_1d(positions: &[usize], dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for k in 0..dim {
            let pair = (k / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = p as f64 * freq;
            out.push(if k % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    out
}

/// 2-D table: the first half of each row encodes the row index, the second
/// half the column index.
pub fn sinusoid_2d(cells: &[(usize, usize)], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let rows = sinusoid_1d(&cells.iter().map(|c| c.0).collect::<Vec<_>>(), half);
    let cols = sinusoid_1d(&cells.iter().map(|c| c.1).collect::<Vec<_>>(), half);
    let mut out = Vec::with_capacity(cells.len() * dim);
    for i in 0..cells.len() {
        out.extend_from_slice(&rows[i * half..(i + 1) * half]);
        out.extend_from_slice(&cols[i * half..(i + 1) * half]);
    }
    out
}

/// Tokens ready for embedding: raw values `[B x n x token_dim]` and the
/// positional rows `[n x d]` that travel with them.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub raw: Tensor,
    pub positions: Tensor,
    /// Prepend the learned summary token (spatial mode).
    pub summary: bool,
    /// Patch grid `(rows, cols)` in spatial mode.
    pub grid: Option<(usize, usize)>,
    /// Original token index of each row (band-group index in spectral mode,
    /// row-major patch index in spatial mode).
    pub token_index: Vec<usize>,
}

impl TokenBatch {
    pub fn batch(&self) -> usize {
        self.raw.shape()[0]
    }

    /// Token count, excluding the summary token.
    pub fn len(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patchifies same-sized cubes. Each token is the patch flattened in
    /// `(channel, row, col)` order; tokens follow the patch grid row-major.
    pub fn spatial(config: &EncoderConfig, cubes: &[&SpectralCube]) -> Result<Self> {
        let (patch, channels) = match config.token_kind {
            TokenKind::SpatialPatch { patch_size, channels } => (patch_size, channels),
            TokenKind::SpectralBand { .. } => {
                return Err(Error::Tokenization("spectral encoder cannot take spatial cubes".into()))
            }
        };
        let first = cubes
            .first()
            .ok_or_else(|| Error::Tokenization("empty cube batch".into()))?;
        let (h, w, c) = first.dims();
        if cubes.iter().any(|cube| cube.dims() != (h, w, c)) {
            return Err(Error::Tokenization("cubes in one batch must share dimensions".into()));
        }
        if c != channels {
            return Err(Error::Tokenization(format!("encoder expects {channels} channels, cube has {c}")));
        }
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::Tokenization(format!(
                "{h}x{w} is not divisible into {patch}x{patch} patches"
            )));
        }
        let (gr, gc) = (h / patch, w / patch);
        let n = gr * gc;
        let td = patch * patch * c;
        let mut raw = Vec::with_capacity(cubes.len() * n * td);
        for cube in cubes {
            for pr in 0..gr {
                for pc in 0..gc {
                    for band in 0..c {
                        let plane = cube.band(band);
                        for y in 0..patch {
                            let row = (pr * patch + y) * w + pc * patch;
                            raw.extend_from_slice(&plane[row..row + patch]);
                        }
                    }
                }
            }
        }
        let cells: Vec<(usize, usize)> = (0..n).map(|i| (i / gc, i % gc)).collect();
        Ok(TokenBatch {
            raw: Tensor::new(vec![cubes.len(), n, td], raw)?,
            positions: Tensor::new(vec![n, config.embed_dim], sinusoid_2d(&cells, config.embed_dim))?,
            summary: true,
            grid: Some((gr, gc)),
            token_index: (0..n).collect(),
        })
    }

    /// Groups `batch` spectral profiles (row-major `[batch x C]`) into band
    /// tokens. With `visible`, only those groups are tokenized and the masked
    /// bands are never read; positions keep their original group index.
    pub fn spectral(
        config: &EncoderConfig,
        profiles: &[f32],
        batch: usize,
        visible: Option<&[usize]>,
    ) -> Result<Self> {
        let (group, channels) = match config.token_kind {
            TokenKind::SpectralBand { group_size, channels } => (group_size, channels),
            TokenKind::SpatialPatch { .. } => {
                return Err(Error::Tokenization("spatial encoder cannot take spectral profiles".into()))
            }
        };
        if batch == 0 || profiles.len() != batch * channels {
            return Err(Error::Tokenization(format!(
                "expected {batch} profiles of {channels} bands, got {} values",
                profiles.len()
            )));
        }
        if channels % group != 0 {
            return Err(Error::Tokenization(format!("{channels} bands do not split into groups of {group}")));
        }
        let groups = channels / group;
        let index: Vec<usize> = match visible {
            Some(v) => v.to_vec(),
            None => (0..groups).collect(),
        };
        if index.is_empty() || index.iter().any(|&g| g >= groups) {
            return Err(Error::Tokenization(format!("visible groups {index:?} invalid for {groups} groups")));
        }
        let mut raw = Vec::with_capacity(batch * index.len() * group);
        for b in 0..batch {
            let profile = &profiles[b * channels..(b + 1) * channels];
            for &g in &index {
                raw.extend_from_slice(&profile[g * group..(g + 1) * group]);
            }
        }
        Ok(TokenBatch {
            raw: Tensor::new(vec![batch, index.len(), group], raw)?,
            positions: Tensor::new(vec![index.len(), config.embed_dim], sinusoid_1d(&index, config.embed_dim))?,
            summary: false,
            grid: None,
            token_index: index,
        })
    }

    /// Exchanges tokens `i` and `j` together with their positional rows.
    pub fn swap_tokens(&mut self, i: usize, j: usize) {
        let (b, n, td) = (self.raw.shape()[0], self.raw.shape()[1], self.raw.shape()[2]);
        let raw = self.raw.data_mut();
        for s in 0..b {
            for k in 0..td {
                raw.swap((s * n + i) * td + k, (s * n + j) * td + k);
            }
        }
        let d = self.positions.shape()[1];
        let pos = self.positions.data_mut();
        for k in 0..d {
            pos.swap(i * d + k, j * d + k);
        }
        self.token_index.swap(i, j);
    }
}
