//! The JSON run configuration.
//!
//! Every section is optional and falls back to the highway defaults. Unknown
//! keys are rejected, and the error names the offending path
//! (`controller.clf.gama: unknown field ...`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scbf_core::barrier::MarginMode;
use scbf_core::controller::ControllerConfig;
use scbf_core::scenario::{
    BarrierSection, DynamicsSection, EstimatorSection, LayoutSection, McSettings, ScenarioConfig,
};

use crate::error::{CliError, Result};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SCBF_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    /// First seed of a campaign.
    pub base: u64,
    /// Runs in a campaign.
    pub count: usize,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self { base: 0, count: 20 }
    }
}

impl SeedsSection {
    pub fn list(&self) -> Vec<u64> {
        (0..self.count as u64).map(|i| self.base + i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Overrides `SCBF_OUT_DIR`; `--out` overrides both.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub dynamics: DynamicsSection,
    pub estimator: EstimatorSection,
    pub barrier: BarrierSection,
    pub controller: ControllerConfig,
    pub scenario: LayoutSection,
    pub monte_carlo: McSettings,
    pub seeds: SeedsSection,
    pub output: OutputSection,
}

impl RunConfigFile {
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            dynamics: self.dynamics.clone(),
            estimator: self.estimator.clone(),
            barrier: self.barrier.clone(),
            controller: self.controller.clone(),
            scenario: self.scenario.clone(),
        }
    }

    /// Parses and validates; `origin` only labels error messages.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = if path == "." {
                inner.to_string()
            } else {
                format!("{path}: {inner}")
            };
            CliError::Config {
                path: origin.to_path_buf(),
                message,
            }
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text, path)
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        let fail = |message: String| CliError::Config {
            path: origin.to_path_buf(),
            message,
        };
        self.scenario_config().validate().map_err(|e| fail(e.to_string()))?;
        if let MarginMode::Grid { .. } = self.barrier.margin {
            return Err(fail(
                "barrier.margin: grid mode is not available for the highway scene; use analytic or epsilon_squared"
                    .into(),
            ));
        }
        if self.monte_carlo.n_rollouts == 0 || !(self.monte_carlo.screen_sigmas > 0.0) {
            return Err(fail(
                "monte_carlo: n_rollouts and screen_sigmas must be positive".into(),
            ));
        }
        if self.seeds.count == 0 {
            return Err(fail("seeds.count must be at least 1".into()));
        }
        Ok(())
    }

    /// `--out`, then `output.dir`, then `$SCBF_OUT_DIR`, then `./out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output.dir {
            return p.clone();
        }
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfigFile> {
        RunConfigFile::from_json(text, Path::new("test.json"))
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg.scenario_config(), ScenarioConfig::default());
        assert_eq!(cfg.seeds.list(), (0..20).collect::<Vec<u64>>());
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let text = serde_json::to_string_pretty(&RunConfigFile::default()).unwrap();
        assert_eq!(parse(&text).unwrap(), RunConfigFile::default());
    }

    #[test]
    fn unknown_key_names_its_location() {
        let err = parse(r#"{"controller": {"clf": {"gama": 1.0}}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("controller.clf"), "{msg}");
        assert!(msg.contains("gama"), "{msg}");
        assert_eq!(err.exit_code(), crate::ExitCode::Config);
    }

    #[test]
    fn wrong_type_names_its_location() {
        let msg = parse(r#"{"barrier": {"p_bar": "high"}}"#).unwrap_err().to_string();
        assert!(msg.contains("barrier.p_bar"), "{msg}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = parse(r#"{"barrier": {"p_bar": 0.001}}"#).unwrap_err();
        assert_eq!(err.exit_code(), crate::ExitCode::Config);
        let err = parse(r#"{"controller": {"u_bounds": {"lo": [2.0, -0.5], "hi": [0.2, 0.5]}}}"#).unwrap_err();
        assert_eq!(err.exit_code(), crate::ExitCode::Config);
        assert!(parse(r#"{"seeds": {"count": 0}}"#).is_err());
        assert!(parse(r#"{"barrier": {"margin": {"mode": "grid", "cells": 8, "directions": 8}}}"#).is_err());
    }

    #[test]
    fn flag_beats_config_dir() {
        let cfg = parse(r#"{"output": {"dir": "from_config"}}"#).unwrap();
        assert_eq!(cfg.output_dir(Some(Path::new("flag"))), PathBuf::from("flag"));
        assert_eq!(cfg.output_dir(None), PathBuf::from("from_config"));
    }
}
