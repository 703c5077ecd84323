use crate::error::{Error, Result};
use crate::kv::KeyValues;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    /// Non-overlapping `patch_size x patch_size` spatial patches over all
    /// channels, plus a learned summary token.
    SpatialPatch { patch_size: usize, channels: usize },
    /// Consecutive groups of `group_size` bands of one spectral profile.
    SpectralBand { group_size: usize, channels: usize },
}

impl TokenKind {
    pub fn channels(&self) -> usize {
        match *self {
            TokenKind::SpatialPatch { channels, .. } | TokenKind::SpectralBand { channels, .. } => channels,
        }
    }

    /// Length of one raw (pre-embedding) token.
    pub fn token_dim(&self) -> usize {
        match *self {
            TokenKind::SpatialPatch { patch_size, channels } => patch_size * patch_size * channels,
            TokenKind::SpectralBand { group_size, .. } => group_size,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, TokenKind::SpatialPatch { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_blocks: usize,
    pub token_kind: TokenKind,
    pub max_tokens: usize,
}

impl EncoderConfig {
    /// Spatial encoder with 12-pixel patches.
    pub fn spatial(channels: usize) -> Self {
        EncoderConfig {
            embed_dim: 64,
            num_heads: 4,
            mlp_hidden: 128,
            num_blocks: 4,
            token_kind: TokenKind::SpatialPatch {
                patch_size: 12,
                channels,
            },
            max_tokens: 1024,
        }
    }

    /// Spectral encoder with 5-band groups.
    pub fn spectral(channels: usize) -> Self {
        EncoderConfig {
            embed_dim: 64,
            num_heads: 4,
            mlp_hidden: 128,
            num_blocks: 4,
            token_kind: TokenKind::SpectralBand {
                group_size: 5,
                channels,
            },
            max_tokens: 1024,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.embed_dim == 0 || self.num_heads == 0 || self.mlp_hidden == 0 || self.max_tokens == 0 {
            return bad(format!("encoder dims must be positive: {self:?}"));
        }
        if self.num_blocks == 0 {
            return bad("encoder needs at least one block".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        match self.token_kind {
            TokenKind::SpatialPatch { patch_size, channels } => {
                if patch_size == 0 || channels == 0 {
                    return bad("patch size and channels must be positive".into());
                }
                if self.embed_dim % 4 != 0 {
                    return bad("spatial positional embedding needs embed_dim divisible by 4".into());
                }
            }
            TokenKind::SpectralBand { group_size, channels } => {
                if group_size == 0 || channels == 0 {
                    return bad("group size and channels must be positive".into());
                }
                if channels % group_size != 0 {
                    return bad(format!("{channels} bands do not split into groups of {group_size}"));
                }
                if self.embed_dim % 2 != 0 {
                    return bad("spectral positional embedding needs an even embed_dim".into());
                }
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}embed_dim"), self.embed_dim);
        kv.set(format!("{prefix}num_heads"), self.num_heads);
        kv.set(format!("{prefix}mlp_hidden"), self.mlp_hidden);
        kv.set(format!("{prefix}num_blocks"), self.num_blocks);
        kv.set(format!("{prefix}max_tokens"), self.max_tokens);
        match self.token_kind {
            TokenKind::SpatialPatch { patch_size, channels } => {
                kv.set(format!("{prefix}token_kind"), "spatial");
                kv.set(format!("{prefix}patch_size"), patch_size);
                kv.set(format!("{prefix}channels"), channels);
            }
            TokenKind::SpectralBand { group_size, channels } => {
                kv.set(format!("{prefix}token_kind"), "spectral");
                kv.set(format!("{prefix}group_size"), group_size);
                kv.set(format!("{prefix}channels"), channels);
            }
        }
    }

    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let get = |k: &str| kv.parse_value::<usize>(&format!("{prefix}{k}"));
        let token_kind = match kv.require(&format!("{prefix}token_kind"))? {
            "spatial" => TokenKind::SpatialPatch {
                patch_size: get("patch_size")?,
                channels: get("channels")?,
            },
            "spectral" => TokenKind::SpectralBand {
                group_size: get("group_size")?,
                channels: get("channels")?,
            },
            other => return Err(Error::Parameter(format!("unknown token kind {other}"))),
        };
        let cfg = EncoderConfig {
            embed_dim: get("embed_dim")?,
            num_heads: get("num_heads")?,
            mlp_hidden: get("mlp_hidden")?,
            num_blocks: get("num_blocks")?,
            token_kind,
            max_tokens: get("max_tokens")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blocks_rejected() {
        let mut c = EncoderConfig::spectral(150);
        c.num_blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut c = EncoderConfig::spectral(150);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        for c in [EncoderConfig::spatial(12), EncoderConfig::spectral(150)] {
            let mut kv = KeyValues::new();
            c.write_kv(&mut kv, "encoder.");
            assert_eq!(EncoderConfig::from_kv(&kv, "encoder.").unwrap(), c);
        }
    }
}
