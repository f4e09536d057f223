use std::fs;
use std::path::{Path, PathBuf};

use geoshift::evaluation::EvalOptions;
use geoshift::synthbench::{BenchSpec, SceneSpec, ShiftSpec, SplitCounts};
use geoshift::transform_approx::FitConfig;
use geoshift::{DetectorConfig, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApproxConfig {
    /// Largest set size; every size from 1 up is fitted.
    pub n_max: usize,
    /// Fitting grid as `[height, width]`.
    pub grid: [usize; 2],
    pub fit: FitConfig,
    /// Side length of the remap visualization in pixels.
    pub visualization_size: u32,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            n_max: 5,
            grid: [64, 64],
            fit: FitConfig::default(),
            visualization_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    /// Governs scene generation, initialization, homography sampling and data order.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub scene: SceneSpec,
    pub shift: ShiftSpec,
    pub counts: SplitCounts,
    pub detector: DetectorConfig,
    pub training: TrainingConfig,
    pub eval: EvalOptions,
    pub approx: ApproxConfig,
}


impl ExperimentConfig {
    pub fn bench(&self) -> BenchSpec {
        BenchSpec {
            scene: self.scene.clone(),
            shift: self.shift.clone(),
            counts: self.counts,
            seed: self.seed,
        }
    }

    /// Same experiment under another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.training.seed = seed;
        c
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), CliError> {
        let wrap = |section: &str, e: geoshift::Error| CliError::Config {
            path: section.into(),
            message: e.to_string(),
        };
        self.scene.validate().map_err(|e| wrap("scene", e))?;
        self.shift.mapping().map_err(|e| wrap("shift", e))?;
        self.detector.validate().map_err(|e| wrap("detector", e))?;
        self.training.validate().map_err(|e| wrap("training", e))?;
        if !self.scene.image_size.is_multiple_of(self.detector.backbone.stride) {
            return Err(CliError::Config {
                path: "scene.image_size".into(),
                message: format!(
                    "{} is not divisible by the backbone stride {}",
                    self.scene.image_size, self.detector.backbone.stride
                ),
            });
        }
        if self.scene.num_classes() != self.detector.num_classes {
            return Err(CliError::Config {
                path: "detector.num_classes".into(),
                message: format!(
                    "{} classes configured but the scene has {} shapes",
                    self.detector.num_classes,
                    self.scene.num_classes()
                ),
            });
        }
        Ok(())
    }
}

/// Reads a TOML config, or the `config` record of a stage manifest (`.json`).
fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let config = manifest.get("config").cloned().ok_or_else(|| CliError::Config {
            path: path.display().to_string(),
            message: "manifest has no `config` record".into(),
        })?;
        return toml::Table::try_from(config).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        });
    }
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Parses `key.path=value`; the value is read as TOML and falls back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Config {
        path: spec.into(),
        message: "override must look like key.path=value".into(),
    })?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| CliError::Config {
            path: parts[..=depth].join("."),
            message: "is not a table".into(),
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// File config (if any) plus overrides, schema-checked.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let top_seed = table.get("seed").and_then(|v| v.as_integer());
    let nested_seed = table
        .get("training")
        .and_then(|t| t.get("seed"))
        .and_then(|v| v.as_integer());
    if let Some(s) = nested_seed {
        if Some(s) != top_seed && !(top_seed.is_none() && s == 0) {
            return Err(CliError::Config {
                path: "training.seed".into(),
                message: "the top-level `seed` governs every stage; set that instead".into(),
            });
        }
    }
    let mut cfg: ExperimentConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    cfg.training.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
