use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wsiseg::model::NetworkConfig;
use wsiseg::pipeline::PipelineConfig;
use wsiseg::synthwsi::DatasetSpec;

use crate::error::CliError;

/// Everything a run needs; every seed lives in here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: NetworkConfig,
    pub pipeline: PipelineConfig,
    /// Dataset directory read by train, map, eval and inspect.
    pub data_dir: Option<PathBuf>,
}

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::new("io", format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))
    }

    /// Writes the fully resolved config, defaults included, into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::new("internal", e.to_string()))?;
        fs::write(dir.join(RESOLVED_CONFIG), json + "\n")
            .map_err(|e| CliError::new("io", format!("cannot write {}: {e}", dir.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"pipeline": {"alpha": 0.0}}"#).unwrap();
        assert_eq!(cfg.pipeline.alpha, 0.0);
        assert_eq!(cfg.pipeline.eta, PipelineConfig::default().eta);
        assert_eq!(cfg.dataset, DatasetSpec::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        for json in [
            r#"{"colour": 1}"#,
            r#"{"model": {"colour": 1}}"#,
            r#"{"dataset": {"colour": 1}}"#,
        ] {
            let err = serde_json::from_str::<ExperimentConfig>(json)
                .unwrap_err()
                .to_string();
            assert!(err.contains("colour"), "{err}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        cfg.echo(dir.path()).unwrap();
        assert_eq!(
            ExperimentConfig::load(&dir.path().join(RESOLVED_CONFIG)).unwrap(),
            cfg
        );
    }
}
