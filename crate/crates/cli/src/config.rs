//! Settings file. Values resolve as command-line flag, then environment
//! variable (`TRIO_*`, handled by clap), then this file, then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use trio_core::trainer::OptimizerKind;

use crate::error::{CliError, Result};

/// File read when `--config` is not given and it exists in the working directory.
pub const DEFAULT_CONFIG_FILE: &str = "trio.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub paths: PathsSection,
    pub train: TrainSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub encoders_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub sd15_dir: Option<PathBuf>,
    pub clip_dir: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub encoder: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub optimizer: Option<OptimizerKind>,
    pub validate_before: Option<bool>,
    pub validate_after: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: Option<String>,
    pub queue_capacity: Option<usize>,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
    }

    /// Reads `explicit` (which must exist) or, failing that, [`DEFAULT_CONFIG_FILE`] when present.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = PathBuf::from(DEFAULT_CONFIG_FILE);
                if !p.is_file() {
                    return Ok(Self::default());
                }
                p
            }
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path)
    }
}

/// First present value of `flag_or_env` and `file`, else `default`.
pub fn pick<T>(flag_or_env: Option<T>, file: Option<T>, default: T) -> T {
    flag_or_env.or(file).unwrap_or(default)
}

/// Like [`pick`], failing with a config error naming `what` when neither is set.
pub fn require<T>(flag_or_env: Option<T>, file: Option<T>, what: &str) -> Result<T> {
    flag_or_env.or(file).ok_or_else(|| {
        CliError::Config(format!(
            "{what} is not set (flag, environment or config file)"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_sections() {
        let text = r#"
            [paths]
            data_dir = "d"
            [train]
            epochs = 3
            optimizer = "adam"
            [serve]
            queue_capacity = 4
        "#;
        let c = FileConfig::parse(text, Path::new("t.toml")).unwrap();
        assert_eq!(c.paths.data_dir, Some(PathBuf::from("d")));
        assert_eq!(c.train.epochs, Some(3));
        assert_eq!(c.train.optimizer, Some(OptimizerKind::Adam));
        assert_eq!(c.serve.queue_capacity, Some(4));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = FileConfig::parse("[paths]\ndata = 1\n", Path::new("t.toml")).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn precedence_prefers_flag_then_file() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
        assert!(require::<i32>(None, None, "x").is_err());
    }
}
