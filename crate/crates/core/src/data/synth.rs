//! Synthetic spectral-unmixing cubes with analytic labels.
//!
//! A dataset shares `E` endmember spectra (gaussian bumps over the bands).
//! Each cube mixes them with per-pixel abundances built from gaussian blobs
//! and normalised onto the simplex; pixel spectra are the abundance-weighted
//! endmember sums plus gaussian noise. Labels mark endmembers whose mean
//! abundance exceeds a threshold; regression targets are a fixed linear map
//! of the mean abundances.
//!
//! Cubes sit on a virtual scene of `scene_cols` columns; each 2x2 block of
//! tiles forms one geo group and shares a presence prior, so neighbouring
//! cubes look alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::mix_seed;
use crate::error::{Error, Result};

use super::cube::SpectralCube;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_cubes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_endmembers: usize,
    pub n_targets: usize,
    pub noise_sigma: f64,
    pub label_threshold: f64,
    /// Gaussian blobs per endmember abundance map.
    pub blobs: usize,
    pub scene_cols: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cubes: 200,
            height: 120,
            width: 120,
            channels: 150,
            n_endmembers: 6,
            n_targets: 4,
            noise_sigma: 0.01,
            label_threshold: 0.1,
            blobs: 3,
            scene_cols: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_cubes == 0 {
            return bad("n_cubes must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("cube dims must be positive".into());
        }
        if self.n_endmembers < 2 {
            return bad(format!("need at least 2 endmembers, got {}", self.n_endmembers));
        }
        if self.channels < 2 * self.n_endmembers {
            return bad(format!(
                "{} bands cannot hold {} distinct endmember peaks (need >= {})",
                self.channels,
                self.n_endmembers,
                2 * self.n_endmembers
            ));
        }
        if self.n_targets == 0 || self.blobs == 0 || self.scene_cols == 0 {
            return bad("n_targets, blobs and scene_cols must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.label_threshold) {
            return bad("noise_sigma must be >= 0 and label_threshold in [0, 1)".into());
        }
        Ok(())
    }
}

/// One generated cube with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCube {
    pub cube: SpectralCube,
    /// Per-pixel abundances as an `H x W x E` cube (band `e` = endmember `e`).
    pub abundances: SpectralCube,
    pub mean_abundance: Vec<f64>,
    pub labels: Vec<u8>,
    pub targets: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// `E x C`, row-major.
    pub endmembers: Vec<f32>,
    /// `n_targets x E`, row-major.
    pub target_map: Vec<f64>,
    pub cubes: Vec<SynthCube>,
}

/// Endmember spectra: evenly spaced gaussian bumps with jittered centres,
/// widths and amplitudes on a small baseline.
pub fn endmember_spectra(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f32> {
    let (e_n, c_n) = (cfg.n_endmembers, cfg.channels);
    let spacing = c_n as f64 / e_n as f64;
    let mut out = Vec::with_capacity(e_n * c_n);
    for e in 0..e_n {
        let center = (e as f64 + 0.5) * spacing + rng.random_range(-0.15..=0.15) * spacing;
        let width = spacing / 2.5 * rng.random_range(0.8..=1.2);
        let amp = rng.random_range(0.5..=1.0);
        for c in 0..c_n {
            let z = (c as f64 - center) / width;
            out.push((0.05 + amp * (-0.5 * z * z).exp()) as f32);
        }
    }
    out
}

/// Geo group of cube `i`: 2x2 tile blocks of the virtual scene.
pub fn geo_group(i: usize, scene_cols: usize) -> String {
    let (row, col) = (i / scene_cols, i % scene_cols);
    format!("g{}_{}", row / 2, col / 2)
}

/// `targets = map . mean_abundance`, accumulated in f64.
pub fn apply_target_map(map: &[f64], n_targets: usize, mean_abundance: &[f64]) -> Vec<f32> {
    let e = mean_abundance.len();
    (0..n_targets)
        .map(|m| (0..e).map(|k| map[m * e + k] * mean_abundance[k]).sum::<f64>() as f32)
        .collect()
}

fn group_prior(group: &str, e: usize, seed: u64) -> f64 {
    let h = group.bytes().fold(seed ^ 0x5bd1_e995, |h, b| mix_seed(h, b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(h, e as u64));
    if rng.random::<bool>() {
        0.75
    } else {
        0.3
    }
}

fn generate_cube(cfg: &SynthConfig, index: usize, endmembers: &[f32], map: &[f64]) -> Result<SynthCube> {
    let (h, w, c, e_n) = (cfg.height, cfg.width, cfg.channels, cfg.n_endmembers);
    let group = geo_group(index, cfg.scene_cols);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));

    let mut present: Vec<bool> = (0..e_n)
        .map(|e| rng.random_bool(group_prior(&group, e, cfg.seed)))
        .collect();
    if !present.iter().any(|&p| p) {
        let k = rng.random_range(0..e_n);
        present[k] = true;
    }
    let activity: Vec<f64> = present
        .iter()
        .map(|&p| if p { rng.random_range(0.5..=1.5) } else { rng.random_range(0.0..=0.02) })
        .collect();

    // Unnormalised abundance fields, E x H x W.
    let mut raw = vec![0.0f64; e_n * h * w];
    let scale = h.max(w) as f64;
    for e in 0..e_n {
        for _ in 0..cfg.blobs {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let s = scale * rng.random_range(0.15..=0.4);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    raw[(e * h + y) * w + x] += activity[e] * (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
    }
    let mut abund = vec![0.0f32; e_n * h * w];
    let mut abund64 = vec![0.0f64; e_n * h * w];
    let mut mean = vec![0.0f64; e_n];
    for p in 0..h * w {
        let total: f64 = (0..e_n).map(|e| raw[e * h * w + p] + 1e-3).sum();
        for e in 0..e_n {
            let a = (raw[e * h * w + p] + 1e-3) / total;
            abund64[e * h * w + p] = a;
            abund[e * h * w + p] = a as f32;
            mean[e] += a;
        }
    }
    mean.iter_mut().for_each(|m| *m /= (h * w) as f64);

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|err| Error::Parameter(err.to_string()))?;
    let mut data = vec![0.0f32; h * w * c];
    for band in 0..c {
        for p in 0..h * w {
            let mut v: f64 = (0..e_n)
                .map(|e| abund64[e * h * w + p] * endmembers[e * c + band] as f64)
                .sum();
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            data[band * h * w + p] = v as f32;
        }
    }

    let id = format!("cube_{index:05}");
    let cube = SpectralCube::new(h, w, c, data)?.with_id(id.clone(), group.clone());
    let abundances = SpectralCube::new(h, w, e_n, abund)?.with_id(id, group);
    let labels = mean.iter().map(|&m| u8::from(m > cfg.label_threshold)).collect();
    let targets = apply_target_map(map, cfg.n_targets, &mean);
    Ok(SynthCube {
        cube,
        abundances,
        mean_abundance: mean,
        labels,
        targets,
    })
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut shared = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
    let endmembers = endmember_spectra(cfg, &mut shared);
    let target_map: Vec<f64> = (0..cfg.n_targets * cfg.n_endmembers)
        .map(|_| shared.random_range(-1.0..=1.0))
        .collect();
    let cubes = (0..cfg.n_cubes)
        .map(|i| generate_cube(cfg, i, &endmembers, &target_map))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config: *cfg,
        endmembers,
        target_map,
        cubes,
    })
}
