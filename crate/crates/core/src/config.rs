//! Experiment configuration: a TOML file with every section optional.
//! Values resolve as command-line override > file > built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CkdaError, Result};
use crate::model::ModelConfig;
use crate::synth::StageConfig;
use crate::trainer::{ModuleToggles, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_stages: usize,
    pub master_seed: u64,
    /// Template for every stage; `stage_index` is ignored.
    pub stage: StageConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            master_seed: 100,
            stage: StageConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Rows of `[mcp, msp, cka]` switches; empty means the full 2³ grid.
    pub grid: Vec<[bool; 3]>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationConfig {
    pub fn rows(&self) -> Vec<[bool; 3]> {
        if !self.grid.is_empty() {
            return self.grid.clone();
        }
        (0..8)
            .map(|k| [k & 1 != 0, k & 2 != 0, k & 4 != 0])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub report_formats: Vec<ReportFormat>,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "ckda".into(),
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            report_formats: vec![ReportFormat::Json, ReportFormat::Table],
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| {
            let field = e
                .span()
                .map(|r| format!("bytes {}..{}", r.start, r.end))
                .unwrap_or_else(|| "document".into());
            CkdaError::config(field, e.message().trim().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CkdaError::Serde(e.to_string()))
    }

    /// Apply `dotted.key=value` overrides, e.g. `train.epochs=5`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml_string()?)
            .map_err(|e| CkdaError::Serde(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CkdaError::config(o.clone(), "override must look like key=value"))?;
            let value = parse_value(raw.trim());
            let mut parts = key.trim().split('.').peekable();
            let mut table = &mut doc;
            while let Some(p) = parts.next() {
                if parts.peek().is_none() {
                    if !table.contains_key(p) {
                        return Err(CkdaError::config(key, "unknown field"));
                    }
                    table.insert(p.to_string(), value.clone());
                    break;
                }
                table = table
                    .get_mut(p)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| CkdaError::config(key, "unknown section"))?;
            }
        }
        let text = toml::to_string(&doc).map_err(|e| CkdaError::Serde(e.to_string()))?;
        *self = Self::from_toml_str(&text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.num_stages == 0 {
            return Err(CkdaError::config("data.num_stages", "must be >= 1"));
        }
        if self.data.stage.geometry != self.model.geometry {
            return Err(CkdaError::config(
                "model.geometry",
                "must equal data.stage.geometry",
            ));
        }
        if self.data.stage.patch_size != self.model.patch_size {
            return Err(CkdaError::config(
                "model.patch_size",
                "must equal data.stage.patch_size",
            ));
        }
        self.data.stage.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(CkdaError::config("ablation.seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// Same experiment with the given module switches.
    pub fn with_toggles(&self, row: [bool; 3], seed: u64) -> Self {
        let mut c = self.clone();
        c.train.toggles = ModuleToggles {
            mcp: row[0],
            msp: row[1],
            cka: row[2],
            ema: self.train.toggles.ema,
        };
        c.train.seed = seed;
        c
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // reuse the TOML grammar for scalars and arrays; fall back to a string
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
