//! `SSLW` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSLW"                      4 bytes
//! version                     u16 (= 1)
//! header length               u32, then that many bytes of UTF-8 key=value text
//! entry count                 u32
//! per entry:
//!   name length               u32, then UTF-8 name
//!   rank                      u32
//!   dims                      rank x u32
//!   payload                   product(dims) x f32
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, ByteReader};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSLW";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: KeyValues,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(header: KeyValues, params: ParamSet) -> Self {
        Checkpoint { header, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header.to_string();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let magic = r.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected SSLW"),
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let hlen = r.u32("header length")? as usize;
        let hoff = r.offset();
        let header_bytes = r.bytes(hlen, "header")?;
        let header_text = std::str::from_utf8(header_bytes).map_err(|_| Error::Format {
            offset: hoff,
            msg: "header is not UTF-8".into(),
        })?;
        let header = KeyValues::parse(header_text).map_err(|e| Error::Format {
            offset: hoff,
            msg: e.to_string(),
        })?;
        let count = r.u32("entry count")?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let noff = r.offset();
            let name = std::str::from_utf8(r.bytes(nlen, "name")?)
                .map_err(|_| Error::Format {
                    offset: noff,
                    msg: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            if dims.is_empty() || dims.contains(&0) {
                return Err(r.err(format!("entry {name} has invalid dims {dims:?}")));
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err("entry size overflows"))?;
            let data = r.f32s(numel, "payload")?;
            let off = r.offset();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format {
                offset: off,
                msg: e.to_string(),
            })?;
            params.insert(name, t).map_err(|e| Error::Format {
                offset: off,
                msg: e.to_string(),
            })?;
        }
        r.finish("last entry")?;
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
