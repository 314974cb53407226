//! JSON run configuration.

use std::path::{Path, PathBuf};

use lcap_core::model::ModelConfig;
use lcap_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Parameters to start from instead of a fresh initialisation.
    pub init_checkpoint: Option<PathBuf>,
    /// Where `train` writes the final parameters, relative to `output_dir`
    /// unless absolute.
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
            checkpoint: PathBuf::from("model.lcap"),
        }
    }
}

impl RunConfig {
    /// Every violated constraint, each prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        out.extend(self.train.problems(&self.model));
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir: must not be empty".into());
        }
        if self.checkpoint.as_os_str().is_empty() {
            out.push("checkpoint: must not be empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Failure::Config(problems))
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig, Failure> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Failure::Config(vec![format!("parse: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
        match path {
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Config(vec![format!("{}: {e}", p.display())]))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(&self.checkpoint)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
