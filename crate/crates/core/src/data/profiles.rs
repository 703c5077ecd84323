use crate::error::{Error, Result};
use crate::kv::KeyValues;

use super::cube::SpectralCube;

/// Side of the pixel block averaged into one profile.
pub const BLOCK: usize = 3;

/// Per-pixel spectra, row-major `[len x channels]`, with their origin.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBatch {
    pub channels: usize,
    pub profiles: Vec<f32>,
    /// `(cube id, top row, left col)` of each block.
    pub coords: Vec<(String, usize, usize)>,
}

impl SpectralBatch {
    pub fn new(channels: usize) -> Self {
        SpectralBatch {
            channels,
            profiles: Vec::new(),
            coords: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn profile(&self, i: usize) -> &[f32] {
        &self.profiles[i * self.channels..(i + 1) * self.channels]
    }

    pub fn push(&mut self, profile: &[f32], coord: (String, usize, usize)) -> Result<()> {
        if profile.len() != self.channels {
            return Err(Error::dim(
                "spectral batch",
                format!("profile of {} bands in a {}-band batch", profile.len(), self.channels),
            ));
        }
        if profile.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "spectral batch" });
        }
        self.profiles.extend_from_slice(profile);
        self.coords.push(coord);
        Ok(())
    }

    pub fn extend(&mut self, other: SpectralBatch) -> Result<()> {
        if other.channels != self.channels {
            return Err(Error::dim("spectral batch", "band counts differ"));
        }
        self.profiles.extend(other.profiles);
        self.coords.extend(other.coords);
        Ok(())
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> SpectralBatch {
        let mut out = SpectralBatch::new(self.channels);
        for &i in idx {
            out.profiles.extend_from_slice(self.profile(i));
            out.coords.push(self.coords[i].clone());
        }
        out
    }
}

/// Mean spectrum of every 3x3 block whose top-left corner lies on the
/// `stride` lattice and which fits inside the cube. With stride 3 the blocks
/// tile the cube: a 60x60 cube yields 400 profiles.
pub fn extract_profiles(cube: &SpectralCube, stride: usize) -> Result<SpectralBatch> {
    if stride == 0 {
        return Err(Error::Parameter("profile stride must be >= 1".into()));
    }
    let (h, w, c) = cube.dims();
    if h < BLOCK || w < BLOCK {
        return Err(Error::Contract(format!("{h}x{w} cube is smaller than a 3x3 block")));
    }
    let mut batch = SpectralBatch::new(c);
    let mut profile = vec![0.0f32; c];
    for r in (0..=h - BLOCK).step_by(stride) {
        for col in (0..=w - BLOCK).step_by(stride) {
            for (band, out) in profile.iter_mut().enumerate() {
                let plane = cube.band(band);
                let mut acc = 0.0f64;
                for y in r..r + BLOCK {
                    for x in col..col + BLOCK {
                        acc += plane[y * w + x] as f64;
                    }
                }
                *out = (acc / (BLOCK * BLOCK) as f64) as f32;
            }
            batch.push(&profile, (cube.cube_id.clone(), r, col))?;
        }
    }
    Ok(batch)
}

/// Per-band mean and standard deviation over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl BandStats {
    pub fn fit(batch: &SpectralBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Contract("band statistics of an empty batch".into()));
        }
        let c = batch.channels;
        let n = batch.len() as f64;
        let mut mean = vec![0.0f64; c];
        for i in 0..batch.len() {
            for (m, &v) in mean.iter_mut().zip(batch.profile(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for i in 0..batch.len() {
            for ((s, &v), m) in var.iter_mut().zip(batch.profile(i)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Ok(BandStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&s| ((s / n).sqrt().max(1e-6)) as f32).collect(),
        })
    }

    /// Statistics over every pixel of every cube.
    pub fn fit_cubes(cubes: &[SpectralCube]) -> Result<Self> {
        let first = cubes
            .first()
            .ok_or_else(|| Error::Contract("band statistics of an empty cube list".into()))?;
        let c = first.channels();
        if cubes.iter().any(|cube| cube.channels() != c) {
            return Err(Error::Contract("cubes disagree on band count".into()));
        }
        let n: f64 = cubes.iter().map(|cube| (cube.height() * cube.width()) as f64).sum();
        let (mut mean, mut std) = (Vec::with_capacity(c), Vec::with_capacity(c));
        for b in 0..c {
            let m = cubes.iter().flat_map(|cube| cube.band(b)).map(|&v| v as f64).sum::<f64>() / n;
            let var = cubes
                .iter()
                .flat_map(|cube| cube.band(b))
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>()
                / n;
            mean.push(m as f32);
            std.push(var.sqrt().max(1e-6) as f32);
        }
        Ok(BandStats { mean, std })
    }

    /// Zero mean, unit deviation: leaves values unchanged.
    pub fn identity(channels: usize) -> Self {
        BandStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_cube(&self, cube: &SpectralCube) -> Result<SpectralCube> {
        if cube.channels() != self.channels() {
            return Err(Error::Contract(format!(
                "statistics for {} bands applied to a {}-band cube",
                self.channels(),
                cube.channels()
            )));
        }
        let mut out = cube.clone();
        for b in 0..self.channels() {
            let (m, s) = (self.mean[b], self.std[b]);
            out.band_mut(b).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    /// Stores both vectors as comma-separated lists under `prefix`.
    pub fn write_kv(&self, kv: &mut KeyValues, prefix: &str) {
        let join = |v: &[f32]| v.iter().map(f32::to_string).collect::<Vec<_>>().join(",");
        kv.set(format!("{prefix}mean"), join(&self.mean));
        kv.set(format!("{prefix}std"), join(&self.std));
    }

    /// `None` when the keys are absent.
    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Option<Self>> {
        let parse = |key: String| -> Result<Option<Vec<f32>>> {
            kv.get(&key)
                .map(|text| {
                    text.split(',')
                        .map(|v| v.parse::<f32>().map_err(|e| Error::Parameter(format!("{key}: {e}"))))
                        .collect()
                })
                .transpose()
        };
        match (parse(format!("{prefix}mean"))?, parse(format!("{prefix}std"))?) {
            (Some(mean), Some(std)) if mean.len() == std.len() && std.iter().all(|&s| s > 0.0) => {
                Ok(Some(BandStats { mean, std }))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Parameter(format!("malformed band statistics under {prefix}"))),
        }
    }

    pub fn normalize(&self, profiles: &mut [f32]) {
        let c = self.mean.len();
        for (i, v) in profiles.iter_mut().enumerate() {
            let b = i % c;
            *v = (*v - self.mean[b]) / self.std[b];
        }
    }
}
