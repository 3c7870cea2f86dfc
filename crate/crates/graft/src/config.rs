//! Experiment configuration files (TOML).
//!
//! Every field of the experiment, grafting, binning and per-worker training
//! settings is spelled out; unknown keys are rejected. See
//! `configs/toy.toml` for an annotated example.

use std::fs;
use std::path::{Path, PathBuf};

use graft_core::coordinator::ExperimentConfig;
use graft_core::data::{Dataset, GratingSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cifar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated oriented gratings.
    Synthetic { train: GratingSpec, test: GratingSpec },
    /// CIFAR-10 binary batches (`data_batch_*.bin`, `test_batch.bin`).
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
        /// Keep only the first `limit` records of each split.
        limit: Option<usize>,
    },
}

impl DataSource {
    /// Loads `(train, test)`. Relative CIFAR paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic { train, test } => Ok((train.generate()?, test.generate()?)),
            DataSource::Cifar10 {
                train_files,
                test_file,
                limit,
            } => {
                let files: Vec<PathBuf> = train_files.iter().map(|p| base.join(p)).collect();
                let train = cifar::read_cifar10(&files, *limit)?;
                let test = cifar::read_cifar10(&[base.join(test_file)], *limit)?;
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// One thread per worker.
    #[default]
    Concurrent,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub execution: Execution,
    pub experiment: ExperimentConfig,
    pub data: DataSource,
}

impl ConfigFile {
    /// Parses and validates; returns the config and any advisory warnings.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1));
            let message = e.message().trim().replace('\n', " ");
            Error::ConfigSyntax(match line {
                Some(l) => format!("line {l}: {message}"),
                None => message,
            })
        })?;
        let warnings = cfg.experiment.validate()?;
        Ok((cfg, warnings))
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(Error::io(path))?)
    }

    /// SHA-256 of the rendered form, as lowercase hex. The executor choice is
    /// left out since it does not change results.
    pub fn hash(&self) -> String {
        let canonical = Self {
            execution: Execution::default(),
            ..self.clone()
        };
        Sha256::digest(canonical.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The toy experiment used by the acceptance suite: two workers, external
    /// entropy grafting, 3-class gratings.
    pub fn toy(k: usize, seed: u64) -> Self {
        let experiment = crate::toy::experiment(k, seed);
        let (train, test) = crate::toy::data_specs(seed);
        Self {
            execution: Execution::Concurrent,
            experiment,
            data: DataSource::Synthetic { train, test },
        }
    }
}
