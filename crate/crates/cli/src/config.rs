//! Run configuration: one TOML file, every key optional, unknown keys
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use hynt::model::HyntConfig;
use hynt::training::TrainOptions;
use hynt::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (f32 | f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Relative paths are resolved against the config file; an empty
    /// `valid` or `test` path means the split is absent.
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

fn present(p: &Path) -> Option<&Path> {
    (!p.as_os_str().is_empty()).then_some(p)
}

impl DataPaths {
    pub fn valid(&self) -> Option<&Path> {
        present(&self.valid)
    }

    pub fn test(&self) -> Option<&Path> {
        present(&self.test)
    }
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            train: "train.txt".into(),
            valid: "valid.txt".into(),
            test: "test.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub data: DataPaths,
    pub model: HyntConfig,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: "run".into(),
            precision: Precision::default(),
            data: DataPaths::default(),
            model: HyntConfig::default(),
            train: TrainOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, making relative data paths and the output
    /// directory absolute against the file's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut config =
            Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.as_os_str().is_empty() {
                return;
            }
            let joined = if p.is_relative() { base.join(&*p) } else { p.clone() };
            *p = std::path::absolute(&joined).unwrap_or(joined);
        };
        resolve(&mut config.out_dir);
        resolve(&mut config.data.train);
        resolve(&mut config.data.valid);
        resolve(&mut config.data.test);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("epochs = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml("[model]\ndim = 8\nheads = 2").is_err());
    }

    #[test]
    fn round_trips() {
        let mut c = RunConfig::from_toml("precision = \"f32\"\n[model]\ndim = 16\n[train]\nno_mask = { numeric = true }").unwrap();
        assert_eq!(c.precision, Precision::F32);
        assert_eq!(c.model.dim, 16);
        assert!(c.train.no_mask.numeric);
        c.data.valid = PathBuf::new();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.data.valid(), None);
    }
}
