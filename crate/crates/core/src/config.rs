//! One TOML file for every pipeline hyperparameter.
//!
//! The config bundles the sampling, scoring, refinement, training, and
//! evaluation sections; unspecified keys take their defaults, so an empty
//! file is a valid full configuration. Individual keys can be overridden
//! from the command line with dotted paths (`scoring.alpha=0.2`), typed
//! according to the key they replace.

use crate::data::SceneStyle;
use crate::eval::EvaluationConfig;
use crate::pnp::SamplingConfig;
use crate::refinement::RefinementConfig;
use crate::scoring::ScoringConfig;
use crate::training::TrainingConfig;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("could not parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("value {value:?} does not fit key {key:?} (expected {expected})")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("override must look like section.key=value, got {0:?}")]
    BadOverride(String),
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub scene_seed: u64,
    pub view_seed: u64,
    /// Scene bounding-box edge in metres.
    pub extent: f64,
    pub style: SceneStyle,
    /// Rendered image size in pixels; both must be grid-stride multiples.
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub train_views: usize,
    pub test_views: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            scene_seed: 1,
            view_seed: 2,
            extent: 4.0,
            style: SceneStyle::Room,
            width: 160,
            height: 120,
            focal: 140.0,
            train_views: 200,
            test_views: 100,
        }
    }
}

/// Every knob of the pipeline in one serializable bundle.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub generation: GenerationConfig,
    pub sampling: SamplingConfig,
    pub scoring: ScoringConfig,
    pub refinement: RefinementConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    /// The full default configuration as a TOML document.
    pub fn default_toml() -> String {
        PipelineConfig::default().to_toml()
    }

    /// Serialize this configuration as a TOML document.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }
}

/// Load a config file; missing keys fall back to defaults.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    Ok(toml::from_str(&text)?)
}

/// Apply one `section.key=value` override. The existing value determines
/// the expected type; unknown paths are rejected.
pub fn apply_override(cfg: &mut PipelineConfig, spec: &str) -> Result<(), ConfigError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() || value.is_empty() {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }

    let mut root =
        toml::Value::try_from(&*cfg).expect("a config always converts to a TOML value");
    let slot = lookup(&mut root, key)?;
    *slot = parse_as(slot, key, value)?;
    let updated: PipelineConfig = root.try_into()?;
    *cfg = updated;
    Ok(())
}

fn lookup<'a>(root: &'a mut toml::Value, key: &str) -> Result<&'a mut toml::Value, ConfigError> {
    let mut current = root;
    for part in key.split('.') {
        current = match current {
            toml::Value::Table(table) => table
                .get_mut(part)
                .ok_or_else(|| ConfigError::UnknownKey { key: key.to_string() })?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        };
    }
    Ok(current)
}

fn parse_as(
    current: &toml::Value,
    key: &str,
    value: &str,
) -> Result<toml::Value, ConfigError> {
    let bad = |expected| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    };
    match current {
        toml::Value::Boolean(_) => {
            value.parse().map(toml::Value::Boolean).map_err(|_| bad("bool"))
        }
        toml::Value::Integer(_) => {
            value.parse().map(toml::Value::Integer).map_err(|_| bad("integer"))
        }
        toml::Value::Float(_) => value.parse().map(toml::Value::Float).map_err(|_| bad("float")),
        toml::Value::String(_) => Ok(toml::Value::String(value.to_string())),
        _ => Err(ConfigError::UnknownKey { key: key.to_string() }),
    }
}
