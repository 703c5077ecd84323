//! Multi-view augmentation: regular (rotation, zoom, blur, noise),
//! global/local cropping and spectral channel dropping.
//!
//! Every view draws from its own ChaCha stream seeded from the master RNG,
//! the source cube id and the view index; the seed is kept in the view's
//! provenance so a single view can be replayed.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SpectralCube;
use crate::error::{Error, Result};

pub const DROP_MIN: f64 = 0.3;
pub const DROP_MAX: f64 = 0.5;

/// Parameters of one regular augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularParams {
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub zoom: f64,
    pub blur_sigma: f64,
    /// Noise standard deviation as a fraction of the cube's value range.
    pub noise_fraction: f64,
}

impl RegularParams {
    pub const IDENTITY: RegularParams = RegularParams {
        quarter_turns: 0,
        zoom: 1.0,
        blur_sigma: 0.0,
        noise_fraction: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &ViewConfig, rng: &mut R) -> Self {
        RegularParams {
            quarter_turns: rng.random_range(0..4u8),
            zoom: rng.random_range(cfg.zoom_range.0..=cfg.zoom_range.1),
            blur_sigma: rng.random_range(0.0..=cfg.blur_sigma_max),
            noise_fraction: cfg.noise_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_globals: usize,
    pub n_locals: usize,
    pub n_spectral: usize,
    /// Smallest global crop side as a fraction of the source side.
    pub global_min_scale: f64,
    pub zoom_range: (f64, f64),
    pub blur_sigma_max: f64,
    pub noise_fraction: f64,
    pub drop_min: f64,
    pub drop_max: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            global_size: 120,
            local_size: 36,
            n_globals: 2,
            n_locals: 4,
            n_spectral: 1,
            global_min_scale: 0.7,
            zoom_range: (0.8, 1.2),
            blur_sigma_max: 1.0,
            noise_fraction: 0.01,
            drop_min: DROP_MIN,
            drop_max: DROP_MAX,
        }
    }
}

impl ViewConfig {
    /// Same view structure scaled to a smaller square source.
    pub fn scaled(global_size: usize, local_size: usize) -> Self {
        ViewConfig {
            global_size,
            local_size,
            ..ViewConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.global_size < 8 || self.local_size == 0 {
            return bad(format!("view sizes {}/{} too small", self.global_size, self.local_size));
        }
        if 2 * self.local_size * self.local_size >= self.global_size * self.global_size {
            return bad(format!(
                "local view {0}x{0} must cover less than half of the {1}x{1} global view",
                self.local_size, self.global_size
            ));
        }
        if self.n_globals == 0 || self.n_locals + self.n_spectral + self.n_globals < 2 {
            return bad("a view set needs at least one global and one other view".into());
        }
        if !(self.global_min_scale > 0.0 && self.global_min_scale <= 1.0) {
            return bad(format!("global_min_scale {} outside (0, 1]", self.global_min_scale));
        }
        if !(self.zoom_range.0 > 0.0 && self.zoom_range.0 <= self.zoom_range.1) {
            return bad(format!("bad zoom range {:?}", self.zoom_range));
        }
        if self.blur_sigma_max < 0.0 || self.noise_fraction < 0.0 {
            return bad("blur and noise magnitudes must be non-negative".into());
        }
        if !(DROP_MIN..=DROP_MAX).contains(&self.drop_min)
            || !(DROP_MIN..=DROP_MAX).contains(&self.drop_max)
            || self.drop_min > self.drop_max
        {
            return bad(format!(
                "drop range [{}, {}] must lie within [0.3, 0.5]",
                self.drop_min, self.drop_max
            ));
        }
        Ok(())
    }
}

/// Rotates every band by `k` quarter turns counter-clockwise.
pub fn rotate90(cube: &SpectralCube, k: u8) -> SpectralCube {
    let k = k % 4;
    if k == 0 {
        return cube.clone();
    }
    let (h, w, c) = cube.dims();
    let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let mut data = Vec::with_capacity(h * w * c);
    for band in 0..c {
        let src = cube.band(band);
        for r in 0..oh {
            for col in 0..ow {
                let (sr, sc) = match k {
                    1 => (col, w - 1 - r),
                    2 => (h - 1 - r, w - 1 - col),
                    _ => (h - 1 - col, r),
                };
                data.push(src[sr * w + sc]);
            }
        }
    }
    let mut out = SpectralCube::new(oh, ow, c, data).expect("rotation keeps size");
    copy_meta(cube, &mut out);
    out
}

fn copy_meta(from: &SpectralCube, to: &mut SpectralCube) {
    to.band_centers = from.band_centers.clone();
    to.cube_id = from.cube_id.clone();
    to.geo_group = from.geo_group.clone();
}

/// Bilinear sample of `plane` (`h x w`) at fractional coordinates, clamped
/// to the border.
fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    if fy == 0.0 && fx == 0.0 {
        return plane[y0 * w + x0];
    }
    let v = |r: usize, c: usize| plane[r * w + c] as f64;
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Zooms about the centre by `factor`, keeping the size: factors above one
/// crop the centre, factors below one pad with the border values.
pub fn zoom(cube: &SpectralCube, factor: f64) -> Result<SpectralCube> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Augmentation(format!("zoom factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok(cube.clone());
    }
    let (h, w, c) = cube.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(h * w * c);
    for band in 0..c {
        let plane = cube.band(band);
        for r in 0..h {
            for col in 0..w {
                let sy = (r as f64 - cy) / factor + cy;
                let sx = (col as f64 - cx) / factor + cx;
                data.push(bilinear(plane, h, w, sy, sx));
            }
        }
    }
    let mut out = SpectralCube::new(h, w, c, data)?;
    copy_meta(cube, &mut out);
    Ok(out)
}

/// Bilinear resize (corner-aligned) to `oh x ow`.
pub fn resize(cube: &SpectralCube, oh: usize, ow: usize) -> Result<SpectralCube> {
    let (h, w, c) = cube.dims();
    if oh == 0 || ow == 0 {
        return Err(Error::Augmentation("resize to an empty size".into()));
    }
    if (oh, ow) == (h, w) {
        return Ok(cube.clone());
    }
    let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(oh * ow * c);
    for band in 0..c {
        let plane = cube.band(band);
        for r in 0..oh {
            for col in 0..ow {
                data.push(bilinear(plane, h, w, r as f64 * sy, col as f64 * sx));
            }
        }
    }
    let mut out = SpectralCube::new(oh, ow, c, data)?;
    copy_meta(cube, &mut out);
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable gaussian blur per band, kernel truncated at 3 sigma, borders
/// clamped. `sigma` below 1e-6 is the identity.
pub fn gaussian_blur(cube: &SpectralCube, sigma: f64) -> Result<SpectralCube> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Augmentation(format!("blur sigma {sigma} must be non-negative")));
    }
    if sigma < 1e-6 {
        return Ok(cube.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w, c) = cube.dims();
    let mut out = cube.clone();
    let mut tmp = vec![0.0f64; h * w];
    for band in 0..c {
        let src = cube.band(band);
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let x = (col as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[r * w + x] as f64;
                }
                tmp[r * w + col] = acc;
            }
        }
        let dst = out.band_mut(band);
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let y = (r as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[y * w + col];
                }
                dst[r * w + col] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Applies rotation, zoom, blur and noise with fixed parameters; only the
/// noise draws from `rng`.
pub fn regular_augment_with<R: Rng + ?Sized>(
    cube: &SpectralCube,
    params: &RegularParams,
    rng: &mut R,
) -> Result<SpectralCube> {
    let (h, w, _) = cube.dims();
    if h < 8 || w < 8 {
        return Err(Error::Augmentation(format!("{h}x{w} cube is too small to augment")));
    }
    let mut out = rotate90(cube, params.quarter_turns);
    out = zoom(&out, params.zoom)?;
    out = gaussian_blur(&out, params.blur_sigma)?;
    if params.noise_fraction > 0.0 {
        let (lo, hi) = out
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let sigma = params.noise_fraction * (hi - lo) as f64;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Augmentation(e.to_string()))?;
            for v in out.data_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
    }
    Ok(out)
}

/// Regular augmentation with parameters drawn from the default ranges.
pub fn regular_augment<R: Rng + ?Sized>(cube: &SpectralCube, rng: &mut R) -> Result<SpectralCube> {
    let params = RegularParams::sample(&ViewConfig::default(), rng);
    regular_augment_with(cube, &params, rng)
}

/// Number of channels zeroed for `fraction` of `channels`: `floor(f*C)`,
/// clamped so the zeroed share lies in [0.3, 0.5].
pub fn drop_count(channels: usize, fraction: f64) -> Result<usize> {
    if !(DROP_MIN..=DROP_MAX).contains(&fraction) {
        return Err(Error::Parameter(format!("drop fraction {fraction} outside [0.3, 0.5]")));
    }
    if channels < 4 {
        return Err(Error::Augmentation(format!("{channels} channels; spectral dropping needs at least 4")));
    }
    let lo = (3 * channels).div_ceil(10);
    let hi = channels / 2;
    Ok(((fraction * channels as f64).floor() as usize).clamp(lo, hi))
}

/// Zeroes a uniformly chosen subset of whole bands. Returns the augmented
/// cube and the sorted dropped indices.
pub fn spectral_aware_augment<R: Rng + ?Sized>(
    cube: &SpectralCube,
    rng: &mut R,
    drop_fraction: f64,
) -> Result<(SpectralCube, Vec<usize>)> {
    let c = cube.channels();
    let k = drop_count(c, drop_fraction)?;
    let mut dropped = sample(rng, c, k).into_vec();
    dropped.sort_unstable();
    let mut out = cube.clone();
    for &band in &dropped {
        out.band_mut(band).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok((out, dropped))
}

/// Random square crop of side in `[min_scale*S, S]` (S the shorter side),
/// resized to `size x size`. Returns the view and its crop window.
pub fn global_view<R: Rng + ?Sized>(
    cube: &SpectralCube,
    size: usize,
    min_scale: f64,
    rng: &mut R,
) -> Result<(SpectralCube, Crop)> {
    let (h, w, _) = cube.dims();
    let side_max = h.min(w);
    let side_min = ((min_scale * side_max as f64).ceil() as usize).clamp(1, side_max);
    let side = rng.random_range(side_min..=side_max);
    let row = rng.random_range(0..=h - side);
    let col = rng.random_range(0..=w - side);
    let crop = Crop { row, col, height: side, width: side };
    let view = resize(&cube.crop(row, col, side, side)?, size, size)?;
    Ok((view, crop))
}

/// Uniformly placed `size x size` crop.
pub fn local_view<R: Rng + ?Sized>(cube: &SpectralCube, size: usize, rng: &mut R) -> Result<(SpectralCube, Crop)> {
    let (h, w, _) = cube.dims();
    if size > h || size > w {
        return Err(Error::Augmentation(format!("local crop {size} exceeds {h}x{w}")));
    }
    let row = rng.random_range(0..=h - size);
    let col = rng.random_range(0..=w - size);
    let crop = Crop { row, col, height: size, width: size };
    Ok((cube.crop(row, col, size, size)?, crop))
}

/// One global view and `n_locals` local views of `cube`.
pub fn global_local_views<R: Rng + ?Sized>(
    cube: &SpectralCube,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<(SpectralCube, Vec<SpectralCube>)> {
    cfg.validate()?;
    let (global, _) = global_view(cube, cfg.global_size, cfg.global_min_scale, rng)?;
    let locals = (0..cfg.n_locals)
        .map(|_| local_view(cube, cfg.local_size, rng).map(|v| v.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((global, locals))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
    Spectral,
}

/// How one view was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub kind: ViewKind,
    pub cube_id: String,
    pub seed: u64,
    pub regular: RegularParams,
    pub crop: Crop,
    pub dropped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub global_views: Vec<SpectralCube>,
    pub local_views: Vec<SpectralCube>,
    pub spectral_views: Vec<SpectralCube>,
    /// Globals first, then locals, then spectral views.
    pub provenance: Vec<ViewRecord>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.global_views.len() + self.local_views.len() + self.spectral_views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// SplitMix64 finaliser, used to decorrelate derived seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds the full view set: per view a regular augmentation, then the
/// global or local crop; spectral views take a global crop and then drop
/// channels.
pub fn make_viewset<R: Rng + ?Sized>(cube: &SpectralCube, cfg: &ViewConfig, rng: &mut R) -> Result<ViewSet> {
    cfg.validate()?;
    let (h, w, _) = cube.dims();
    if h.min(w) < cfg.global_size {
        return Err(Error::Augmentation(format!(
            "{h}x{w} cube is smaller than the {0}x{0} global view",
            cfg.global_size
        )));
    }
    let base = mix_seed(rng.random::<u64>(), fnv1a(cube.cube_id.as_bytes()));
    let mut set = ViewSet {
        global_views: Vec::with_capacity(cfg.n_globals),
        local_views: Vec::with_capacity(cfg.n_locals),
        spectral_views: Vec::with_capacity(cfg.n_spectral),
        provenance: Vec::new(),
    };
    let kinds = std::iter::repeat_n(ViewKind::Global, cfg.n_globals)
        .chain(std::iter::repeat_n(ViewKind::Local, cfg.n_locals))
        .chain(std::iter::repeat_n(ViewKind::Spectral, cfg.n_spectral));
    for (index, kind) in kinds.enumerate() {
        let seed = mix_seed(base, index as u64);
        let mut vr = ChaCha8Rng::seed_from_u64(seed);
        let regular = RegularParams::sample(cfg, &mut vr);
        let aug = regular_augment_with(cube, &regular, &mut vr)?;
        let mut dropped = Vec::new();
        let (view, crop) = match kind {
            ViewKind::Global => global_view(&aug, cfg.global_size, cfg.global_min_scale, &mut vr)?,
            ViewKind::Local => local_view(&aug, cfg.local_size, &mut vr)?,
            ViewKind::Spectral => {
                let (g, crop) = global_view(&aug, cfg.global_size, cfg.global_min_scale, &mut vr)?;
                let fraction = vr.random_range(cfg.drop_min..=cfg.drop_max);
                let (s, d) = spectral_aware_augment(&g, &mut vr, fraction)?;
                dropped = d;
                (s, crop)
            }
        };
        match kind {
            ViewKind::Global => set.global_views.push(view),
            ViewKind::Local => set.local_views.push(view),
            ViewKind::Spectral => set.spectral_views.push(view),
        }
        set.provenance.push(ViewRecord {
            kind,
            cube_id: cube.cube_id.clone(),
            seed,
            regular,
            crop,
            dropped,
        });
    }
    Ok(set)
}
