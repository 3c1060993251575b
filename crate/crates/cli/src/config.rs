//! The run configuration file: every tunable of every command in one TOML
//! document, with unknown keys rejected.

use std::path::{Path, PathBuf};

use auvire_core::datagen::SyntheticConfig;
use auvire_core::network::ModelConfig;
use auvire_core::trainer::{GridSpec, TrainConfig};
use auvire_core::wildscore::{ValiditySpec, DEFAULT_THETA};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Name of the resolved configuration written next to every command's outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generate: GenerateConfig,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub validity: ValiditySpec,
    pub score: ScoreConfig,
    pub calibrate: CalibrateConfig,
    pub grid: GridSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generate: GenerateConfig::default(),
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            validity: ValiditySpec::default(),
            score: ScoreConfig::default(),
            calibrate: CalibrateConfig::default(),
            grid: GridSpec::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub num_samples: usize,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            num_samples: 100,
            split_ratios: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Fraction of valid time covered by segments above theta.
    #[default]
    PsiM,
    /// Score-weighted covered duration.
    PsiS,
    /// Highest segment score.
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub mode: ScoreMode,
    pub theta: f64,
    /// Split valid ranges into `validity.chunk_s` windows. When off, every
    /// valid range is scored as one window.
    pub chunking: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mode: ScoreMode::PsiM,
            theta: DEFAULT_THETA,
            chunking: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub theta_grid: Vec<f64>,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            theta_grid: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// Not written to the resolved config, which already lives there, so
    /// runs into different directories emit identical files.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a TOML file; a missing or malformed file is a usage error.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialise config: {e}")))
    }

    /// One seed for data, initialisation and shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
    }

    /// Checks every section so commands can fail before touching the disk.
    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: auvire_core::Error| CliError::Usage(e.to_string());
        self.data.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.validity.validate().map_err(usage)?;
        let r = self.generate.split_ratios;
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Usage(format!(
                "split ratios {r:?} must be fractions summing to 1"
            )));
        }
        if self.generate.num_samples == 0 {
            return Err(CliError::Usage("num_samples must be positive".into()));
        }
        let theta_ok = |t: f64| (0.0..=1.0).contains(&t);
        if !theta_ok(self.score.theta) {
            return Err(CliError::Usage(format!("theta {} outside [0, 1]", self.score.theta)));
        }
        if self.calibrate.theta_grid.is_empty() || !self.calibrate.theta_grid.iter().all(|&t| theta_ok(t)) {
            return Err(CliError::Usage(format!(
                "theta grid {:?} must be non-empty with values in [0, 1]",
                self.calibrate.theta_grid
            )));
        }
        if self.grid.cells().is_empty() {
            return Err(CliError::Usage("sweep grid has no cells".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
