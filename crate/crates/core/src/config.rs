//! Application configuration: one JSON file with a versioned schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::SamplerConfig;
use crate::sweep::GridSpec;
use crate::synthenv::EnvConfig;
use crate::trainer::DEFAULT_BATCH_SIZE;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoSection {
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
}

fn default_n_eval() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_parallelism() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub schema_version: u32,
    pub env: EnvConfig,
    pub sft: SftSection,
    pub po: PoSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.env.validate()?;
        if self.env.n_train == 0 {
            return Err(Error::config("env.n_train", "must be at least 1"));
        }
        if self.sft.learning_rates.is_empty() || self.sft.learning_rates.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("sft.learning_rates", "list must be nonempty with values >= 0"));
        }
        if self.sft.epochs.is_empty() || self.sft.epochs.contains(&0) {
            return Err(Error::config("sft.epochs", "list must be nonempty with values >= 1"));
        }
        if self.sft.batch_size == 0 {
            return Err(Error::config("sft.batch_size", "must be at least 1"));
        }
        self.po.grid.validate()?;
        self.eval.sampler.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("eval.sampler.{field}"), message),
            other => other,
        })?;
        if self.eval.n_eval == 0 {
            return Err(Error::config("eval.n_eval", "must be at least 1"));
        }
        if self.run.parallelism == 0 {
            return Err(Error::config("run.parallelism", "must be at least 1"));
        }
        Ok(())
    }

    /// Parses and validates. Errors carry the line of the offending key in `text`.
    pub fn from_str_at(text: &str, path: &Path) -> Result<Self> {
        let config: AppConfig = serde_json::from_str(text).map_err(|e| Error::ConfigFile {
            path: path.to_path_buf(),
            line: e.line(),
            field: "<parse>".into(),
            message: e.to_string(),
        })?;
        config.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::ConfigFile {
                path: path.to_path_buf(),
                line: locate_field(text, &field).unwrap_or(1),
                field,
                message,
            },
            other => other,
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_at(&text, path)
    }
}

/// 1-based line of the key named by a dotted path, found by searching for
/// each segment's quoted key after the previous one.
pub fn locate_field(text: &str, field: &str) -> Option<usize> {
    let mut pos = 0;
    let mut found = None;
    for segment in field.split('.') {
        let needle = format!("\"{segment}\"");
        match text[pos..].find(&needle) {
            Some(offset) => {
                pos += offset;
                found = Some(pos);
                pos += needle.len();
            }
            None => break,
        }
    }
    found.map(|at| text[..at].matches('\n').count() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locates_nested_keys() {
        let text = "{\n  \"env\": {\n    \"vocab\": 1,\n    \"label_noise\": 0.7\n  },\n  \"label_noise\": 0\n}";
        assert_eq!(locate_field(text, "env.label_noise"), Some(4));
        assert_eq!(locate_field(text, "env"), Some(2));
        assert_eq!(locate_field(text, "nothing"), None);
    }
}
