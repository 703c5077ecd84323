//! Dataset manifests with geo-group-disjoint train/validation splits.
//!
//! CSV layout: `cube_id,path,geo_group,split,label_0..label_{K-1},target_0..target_{M-1}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Split(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub cube_id: String,
    pub path: PathBuf,
    pub geo_group: String,
    pub split: Split,
    pub labels: Vec<u8>,
    pub targets: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Checks label/target widths and geo-group disjointness.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn n_labels(&self) -> usize {
        self.entries.first().map_or(0, |e| e.labels.len())
    }

    pub fn n_targets(&self) -> usize {
        self.entries.first().map_or(0, |e| e.targets.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (k, m) = (self.n_labels(), self.n_targets());
        let mut ids = BTreeSet::new();
        let mut group_split: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if e.labels.len() != k || e.targets.len() != m {
                return Err(Error::Split(format!("entry {} has a different label/target width", e.cube_id)));
            }
            if e.labels.iter().any(|&l| l > 1) {
                return Err(Error::Split(format!("entry {} has a non-binary label", e.cube_id)));
            }
            if !ids.insert(e.cube_id.as_str()) {
                return Err(Error::Split(format!("duplicate cube id {}", e.cube_id)));
            }
            if let Some(&s) = group_split.get(e.geo_group.as_str()) {
                if s != e.split {
                    return Err(Error::Split(format!(
                        "geo group {} appears in both train and val",
                        e.geo_group
                    )));
                }
            } else {
                group_split.insert(&e.geo_group, e.split);
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["cube_id".to_string(), "path".into(), "geo_group".into(), "split".into()];
        header.extend((0..self.n_labels()).map(|k| format!("label_{k}")));
        header.extend((0..self.n_targets()).map(|k| format!("target_{k}")));
        w.write_record(&header).map_err(|e| Error::table("manifest", e))?;
        for e in &self.entries {
            let mut rec = vec![
                e.cube_id.clone(),
                e.path.to_string_lossy().into_owned(),
                e.geo_group.clone(),
                e.split.to_string(),
            ];
            rec.extend(e.labels.iter().map(|l| l.to_string()));
            rec.extend(e.targets.iter().map(|t| t.to_string()));
            w.write_record(&rec).map_err(|e| Error::table("manifest", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::table("manifest", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::table(origin, e))?.clone();
        let fixed = ["cube_id", "path", "geo_group", "split"];
        if header.len() < 4 || header.iter().take(4).ne(fixed) {
            return Err(Error::table(origin, "manifest header must start with cube_id,path,geo_group,split"));
        }
        let n_labels = header.iter().filter(|h| h.starts_with("label_")).count();
        let n_targets = header.iter().filter(|h| h.starts_with("target_")).count();
        if 4 + n_labels + n_targets != header.len() {
            return Err(Error::table(origin, "unexpected manifest columns"));
        }
        let mut entries = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::table(origin, e))?;
            let at = |msg: String| Error::table(origin, format!("row {}: {msg}", line + 2));
            let labels = (0..n_labels)
                .map(|k| rec[4 + k].parse::<u8>().map_err(|e| at(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let targets = (0..n_targets)
                .map(|k| rec[4 + n_labels + k].parse::<f32>().map_err(|e| at(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            entries.push(ManifestEntry {
                cube_id: rec[0].to_string(),
                path: PathBuf::from(&rec[1]),
                geo_group: rec[2].to_string(),
                split: rec[3].parse()?,
                labels,
                targets,
            });
        }
        Manifest::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_csv(&text, path)
    }
}

/// Assigns whole geo groups to train or val. Groups are visited in a
/// seeded random order and moved to val while that keeps the val count at
/// or below `round(val_fraction * n)`; at least one group lands on each side.
pub fn split_manifest<R: Rng + ?Sized>(
    mut entries: Vec<ManifestEntry>,
    val_fraction: f64,
    rng: &mut R,
) -> Result<Manifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Parameter(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
    for e in &entries {
        *sizes.entry(e.geo_group.clone()).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 geo groups to split, found {}",
            sizes.len()
        )));
    }
    let mut groups: Vec<(String, usize)> = sizes.into_iter().collect();
    groups.shuffle(rng);
    let target = (val_fraction * entries.len() as f64).round() as usize;
    let mut val = BTreeSet::new();
    let mut count = 0;
    for (g, n) in &groups {
        if val.len() + 1 == groups.len() {
            break;
        }
        if count + n <= target {
            count += n;
            val.insert(g.clone());
        }
    }
    if val.is_empty() {
        let smallest = groups.iter().min_by_key(|g| g.1).expect("two or more groups");
        val.insert(smallest.0.clone());
    }
    for e in &mut entries {
        e.split = if val.contains(&e.geo_group) { Split::Val } else { Split::Train };
    }
    Manifest::new(entries)
}
