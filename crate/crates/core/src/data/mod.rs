//! Cube I/O, manifests, profile extraction and the synthetic dataset.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.csv            cube_id,path,geo_group,split,label_*,target_*
//! cubes/<id>.scub         spectral cubes
//! abundances/<id>.scub    per-pixel ground-truth abundances (synthetic only)
//! labels.csv              cube_id,label_*
//! targets.csv             cube_id,target_*
//! mean_abundance.csv      cube_id,abundance_*
//! endmembers.csv          one endmember spectrum per row
//! target_map.csv          one row per target, one column per endmember
//! ```

mod cube;
mod manifest;
mod profiles;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

pub use cube::{read_cube, write_cube, SpectralCube};
pub use manifest::{split_manifest, Manifest, ManifestEntry, Split};
pub use profiles::{extract_profiles, BandStats, SpectralBatch, BLOCK};
pub use synth::{apply_target_map, endmember_spectra, generate_synthetic, geo_group, SynthConfig, SynthCube, SynthDataset};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::table(path, e))?;
    if !header.is_empty() {
        w.write_record(header).map_err(|e| Error::table(path, e))?;
    }
    for r in rows {
        w.write_record(&r).map_err(|e| Error::table(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn keyed_header(prefix: &str, n: usize) -> Vec<String> {
    std::iter::once("cube_id".to_string())
        .chain((0..n).map(|k| format!("{prefix}_{k}")))
        .collect()
}

/// Writes a synthetic dataset under `dir` and returns its manifest.
pub fn write_dataset<R: Rng + ?Sized>(
    dir: impl AsRef<Path>,
    data: &SynthDataset,
    val_fraction: f64,
    rng: &mut R,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["cubes", "abundances"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(data.cubes.len());
    for sc in &data.cubes {
        let rel = PathBuf::from("cubes").join(format!("{}.scub", sc.cube.cube_id));
        write_cube(&sc.cube, dir.join(&rel))?;
        write_cube(&sc.abundances, dir.join("abundances").join(format!("{}.scub", sc.cube.cube_id)))?;
        entries.push(ManifestEntry {
            cube_id: sc.cube.cube_id.clone(),
            path: rel,
            geo_group: sc.cube.geo_group.clone(),
            split: Split::Train,
            labels: sc.labels.clone(),
            targets: sc.targets.clone(),
        });
    }
    let manifest = split_manifest(entries, val_fraction, rng)?;
    manifest.save(dir.join(MANIFEST_FILE))?;

    let cfg = &data.config;
    let keyed = |f: &dyn Fn(&SynthCube) -> Vec<String>| {
        data.cubes
            .iter()
            .map(|sc| std::iter::once(sc.cube.cube_id.clone()).chain(f(sc)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    write_rows(
        &dir.join("labels.csv"),
        &keyed_header("label", cfg.n_endmembers),
        keyed(&|sc| sc.labels.iter().map(|v| v.to_string()).collect()).into_iter(),
    )?;
    write_rows(
        &dir.join("targets.csv"),
        &keyed_header("target", cfg.n_targets),
        keyed(&|sc| sc.targets.iter().map(|v| v.to_string()).collect()).into_iter(),
    )?;
    write_rows(
        &dir.join("mean_abundance.csv"),
        &keyed_header("abundance", cfg.n_endmembers),
        keyed(&|sc| sc.mean_abundance.iter().map(|v| v.to_string()).collect()).into_iter(),
    )?;
    write_rows(
        &dir.join("endmembers.csv"),
        &[],
        data.endmembers
            .chunks(cfg.channels)
            .map(|row| row.iter().map(|v| v.to_string()).collect()),
    )?;
    write_rows(
        &dir.join("target_map.csv"),
        &[],
        data.target_map
            .chunks(cfg.n_endmembers)
            .map(|row| row.iter().map(|v| v.to_string()).collect()),
    )?;
    Ok(manifest)
}

/// Loads the manifest in `dir` and every cube it lists, with ids and groups
/// taken from the manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<SpectralCube>)> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir.join(MANIFEST_FILE))?;
    let cubes = manifest
        .entries
        .iter()
        .map(|e| {
            let path = if e.path.is_absolute() { e.path.clone() } else { dir.join(&e.path) };
            let mut cube = read_cube(&path)?;
            cube.cube_id = e.cube_id.clone();
            cube.geo_group = e.geo_group.clone();
            Ok(cube)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cubes))
}

/// Profiles of every cube, concatenated.
pub fn profiles_of<'a>(cubes: impl IntoIterator<Item = &'a SpectralCube>, stride: usize) -> Result<SpectralBatch> {
    let mut iter = cubes.into_iter().peekable();
    let first = iter.peek().ok_or_else(|| Error::Contract("no cubes to extract profiles from".into()))?;
    let mut batch = SpectralBatch::new(first.channels());
    for cube in iter {
        batch.extend(extract_profiles(cube, stride)?)?;
    }
    Ok(batch)
}
