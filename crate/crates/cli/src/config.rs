use std::path::{Path, PathBuf};

use cvae::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

/// A training run: the model configuration plus where to read and write.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub header: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

fn yes() -> bool {
    true
}

impl RunConfigFile {
    /// Reads `path` as JSON when it ends in `.json`, TOML otherwise. Relative
    /// paths inside resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let mut cfg = Self::parse(&text, is_json).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.mask, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Schema errors name the offending field path.
    pub fn parse(text: &str, json: bool) -> Result<Self, String> {
        let parsed = if json {
            let mut de = serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(&mut de).map_err(|e| format!("{}: {}", e.path(), e.inner()))
        } else {
            let de = toml::Deserializer::new(text);
            serde_path_to_error::deserialize(de).map_err(|e| format!("{}: {}", e.path(), e.inner().message()))
        }?;
        Ok(parsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let t = RunConfigFile::parse("data = \"a.csv\"\n[train]\nmodel = \"zi\"\nepochs = 3\n[train.reg]\nenabled = true\n", false).unwrap();
        let j = RunConfigFile::parse(r#"{"data": "a.csv", "train": {"model": "zi", "epochs": 3, "reg": {"enabled": true}}}"#, true).unwrap();
        assert_eq!(t.train, j.train);
        assert_eq!(t.data, j.data);
        assert!(t.header);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfigFile::parse("[train.reg]\nlambda = \"big\"\n", false).unwrap_err();
        assert!(e.starts_with("train.reg.lambda"), "{e}");
        let e = RunConfigFile::parse(r#"{"train": {"epocs": 3}}"#, true).unwrap_err();
        assert!(e.contains("epocs"), "{e}");
    }
}
