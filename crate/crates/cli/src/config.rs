//! Run configuration and the output directory layout.
//!
//! Every command starts from its built-in defaults, applies the optional
//! `key=value` file given with `--config`, then the flags given on the
//! command line. The result is written next to the outputs as
//! `<command>.cfg`, which can be passed back with `--config` to replay the
//! run.

use std::fs;
use std::path::{Path, PathBuf};

use specssl::KeyValues;

use crate::error::{io, Result};

/// Flag values that were actually given.
#[derive(Default)]
pub struct Overrides(KeyValues);

impl Overrides {
    pub fn set<T: ToString>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.set(key, v);
        }
        self
    }
}

pub fn load_file(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        None => Ok(KeyValues::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io(p, e))?;
            Ok(KeyValues::parse(&text)?)
        }
    }
}

/// `defaults < file < flags`. File keys the command does not know are
/// reported and dropped, so the resolved record only holds what was used.
pub fn resolve(defaults: &KeyValues, file: &KeyValues, flags: &Overrides) -> KeyValues {
    let mut known = KeyValues::new();
    for (k, v) in file.iter() {
        if defaults.get(k).is_some() {
            known.set(k, v);
        } else {
            log::warn!("config key {k} is not used by this command; ignored");
        }
    }
    defaults.merged(&known).merged(&flags.0)
}

/// `checkpoints/`, `metrics/` and `traces/` under the `--out` directory.
pub struct Layout {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
    pub traces: PathBuf,
}

impl Layout {
    pub fn create(root: &Path) -> Result<Self> {
        let layout = Layout {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            metrics: root.join("metrics"),
            traces: root.join("traces"),
        };
        for dir in [&layout.checkpoints, &layout.metrics, &layout.traces] {
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        Ok(layout)
    }

    pub fn write_config(&self, command: &str, resolved: &KeyValues) -> Result<PathBuf> {
        let path = self.root.join(format!("{command}.cfg"));
        write_text(&path, &resolved.to_string())?;
        Ok(path)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}
