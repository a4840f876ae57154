pub mod data;
pub mod evaluate;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use cwdm::{Error, Result};

use crate::config::{self, RunConfig};
use crate::ConfigArgs;

/// Collects explicit flags as config-key overrides.
#[derive(Default)]
pub struct Flags(Vec<(&'static str, toml::Value)>);

impl Flags {
    pub fn path(mut self, key: &'static str, v: &Option<PathBuf>) -> Self {
        if let Some(p) = v {
            self.0.push((key, toml::Value::String(p.display().to_string())));
        }
        self
    }

    pub fn int<T: Into<i64> + Copy>(mut self, key: &'static str, v: Option<T>) -> Self {
        if let Some(x) = v {
            self.0.push((key, toml::Value::Integer(x.into())));
        }
        self
    }

    pub fn uint(self, key: &'static str, v: Option<u64>) -> Self {
        let v = v.map(|x| i64::try_from(x).unwrap_or(i64::MAX));
        self.int(key, v)
    }

    pub fn float(mut self, key: &'static str, v: Option<f64>) -> Self {
        if let Some(x) = v {
            self.0.push((key, toml::Value::Float(x)));
        }
        self
    }

    pub fn string(mut self, key: &'static str, v: Option<String>) -> Self {
        if let Some(x) = v {
            self.0.push((key, toml::Value::String(x)));
        }
        self
    }

    /// An empty list means the flag was not given.
    pub fn list<T: Clone + Into<toml::Value>>(mut self, key: &'static str, v: &[T]) -> Self {
        if !v.is_empty() {
            let items = v.iter().cloned().map(Into::into).collect();
            self.0.push((key, toml::Value::Array(items)));
        }
        self
    }

    pub fn resolve(self, args: &ConfigArgs) -> Result<RunConfig> {
        config::resolve(args.toy, args.config.as_deref(), &args.sets, &self.0)
    }
}

pub fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} is not a directory", path.display())))
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
