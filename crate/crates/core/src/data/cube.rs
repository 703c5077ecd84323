//! Spectral cubes and the `SCUB` storage format.
//!
//! ```text
//! "SCUB"                     4 bytes
//! version                    u16 (= 1)
//! H, W, C                    3 x u32
//! flags                      u8, bit 0 = band-center block present
//! band centers (optional)    C x f32, nanometres
//! payload                    H*W*C x f32, band-sequential
//! ```
//!
//! All values little-endian. Cube id and geo group live in the manifest, not
//! in the file.

use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, ByteReader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCUB";
pub const VERSION: u16 = 1;
const FLAG_BAND_CENTERS: u8 = 0b1;

/// An `H x W x C` image cube stored band-sequentially: band `c` occupies
/// `data[c*H*W .. (c+1)*H*W]` in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    pub band_centers: Option<Vec<f32>>,
    pub cube_id: String,
    pub geo_group: String,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim("cube", format!("{height}x{width}x{channels} has an empty axis")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(
                "cube",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "cube" });
        }
        Ok(SpectralCube {
            height,
            width,
            channels,
            data,
            band_centers: None,
            cube_id: String::new(),
            geo_group: String::new(),
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels]).expect("non-empty dims")
    }

    pub fn with_id(mut self, cube_id: impl Into<String>, geo_group: impl Into<String>) -> Self {
        self.cube_id = cube_id.into();
        self.geo_group = geo_group.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn band(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn band_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, band: usize, value: f32) {
        self.data[(band * self.height + row) * self.width + col] = value;
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(row, col, c)).collect()
    }

    /// Mean spectrum over all pixels.
    pub fn mean_spectrum(&self) -> Vec<f32> {
        (0..self.channels)
            .map(|c| {
                let b = self.band(c);
                (b.iter().map(|&v| v as f64).sum::<f64>() / b.len() as f64) as f32
            })
            .collect()
    }

    /// Copy of the `h x w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<SpectralCube> {
        if h == 0 || w == 0 || row + h > self.height || col + w > self.width {
            return Err(Error::dim(
                "crop",
                format!("{h}x{w} at ({row},{col}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            let band = self.band(c);
            for r in row..row + h {
                data.extend_from_slice(&band[r * self.width + col..r * self.width + col + w]);
            }
        }
        let mut out = SpectralCube::new(h, w, self.channels, data)?;
        out.band_centers = self.band_centers.clone();
        out.cube_id = self.cube_id.clone();
        out.geo_group = self.geo_group.clone();
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(23 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let flags = if self.band_centers.is_some() { FLAG_BAND_CENTERS } else { 0 };
        out.push(flags);
        if let Some(centers) = &self.band_centers {
            put_f32s(&mut out, centers);
        }
        put_f32s(&mut out, &self.data);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let magic = r.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected SCUB"),
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported cube version {version}"),
            });
        }
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let c = r.u32("channels")? as usize;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Format {
                offset: 6,
                msg: format!("empty cube dims {h}x{w}x{c}"),
            });
        }
        let flags = r.u8("flags")?;
        if flags & !FLAG_BAND_CENTERS != 0 {
            return Err(r.err(format!("unknown flag bits {flags:#04x}")));
        }
        let band_centers = if flags & FLAG_BAND_CENTERS != 0 {
            Some(r.f32s(c, "band centers")?)
        } else {
            None
        };
        let n = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(c))
            .ok_or_else(|| r.err("cube size overflows"))?;
        let data = r.f32s(n, "payload")?;
        r.finish("payload")?;
        let mut cube = SpectralCube::new(h, w, c, data)?;
        cube.band_centers = band_centers;
        Ok(cube)
    }
}

pub fn write_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cube.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cube = SpectralCube::from_bytes(&buf)?;
    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
        cube.cube_id = stem.to_string();
    }
    Ok(cube)
}
