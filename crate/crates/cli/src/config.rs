use std::path::{Path, PathBuf};

use fdu_core::{LocalizationConfig, PlantSpec, PoolScope, ProbeConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The `localization` section. Probes trained here use the top-level `probe` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationSection {
    pub alpha: f64,
    pub gamma: f64,
    pub holdout_fraction: f64,
}

impl Default for LocalizationSection {
    fn default() -> Self {
        let d = LocalizationConfig::default();
        Self { alpha: d.alpha, gamma: d.gamma, holdout_fraction: d.holdout_fraction }
    }
}

pub const DEFAULT_RATIOS: [f64; 6] = [0.01, 0.1, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Seeds of the random masks; one report per seed and random mode.
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: (0..20).collect(), ratios: DEFAULT_RATIOS.to_vec() }
    }
}

/// One JSON file drives every command. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dump_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub localization: LocalizationSection,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub pool_scope: PoolScope,
    /// Layers to score in `select`; when absent they come from `critical_layers.json`.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub synth: Option<PlantSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.dump_path = cfg.dump_path.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn localization_config(&self) -> LocalizationConfig {
        LocalizationConfig {
            alpha: self.localization.alpha,
            gamma: self.localization.gamma,
            holdout_fraction: self.localization.holdout_fraction,
            probe: self.probe.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.localization_config().validate().map_err(|e| CliError::Input(e.to_string()))?;
        let r = &self.ablation.ratios;
        if r.is_empty() || r.iter().any(|&x| !(x > 0.0 && x <= 1.0)) || r.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Input(format!("ratios must be strictly increasing values in (0, 1], got {r:?}")));
        }
        if let Some(layers) = &self.layers {
            if layers.is_empty() {
                return Err(CliError::Input("layers must not be empty".into()));
            }
        }
        Ok(())
    }

    pub fn dump_path(&self) -> Result<&Path, CliError> {
        self.dump_path.as_deref().ok_or_else(|| CliError::Input("config has no dump_path".into()))
    }
}
