//! Run configuration: a TOML key tree with dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::AugmentationSpec;
use crate::backbone::PyramidConfig;
use crate::downstream::{DownstreamConfig, FinetuneSchedule};
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding a `manifest.json` of unlabelled pretraining volumes.
    pub data: PathBuf,
    /// Directory of labelled volumes for downstream evaluation; defaults to
    /// `data` when absent.
    pub labeled: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and results.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("data"),
            labeled: None,
            out: PathBuf::from("runs"),
        }
    }
}

impl PathsConfig {
    pub fn labeled_dir(&self) -> &Path {
        self.labeled.as_deref().unwrap_or(&self.data)
    }
}

/// Switches for the individual contributions of the method.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Local corruptions (shuffling, in-painting). The global intensity
    /// curve stays on either way.
    pub aug: bool,
    pub contrastive: bool,
    pub restorative: bool,
    /// Balanced pyramid. When off, the unbalanced reference architecture is
    /// trained instead.
    pub arch: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            aug: true,
            contrastive: true,
            restorative: true,
            arch: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub trainer: TrainConfig,
    pub augment: AugmentationSpec,
    pub model: PyramidConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub finetune: FinetuneSchedule,
    pub downstream: DownstreamConfig,
}

/// Which loss terms a run optimises.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub contrastive: bool,
    pub restorative: bool,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit in a signed 64-bit integer"));
        }
        self.trainer.validate()?;
        self.model.validate()?;
        self.model_config().check_patch(self.trainer.patch_size).map_err(|e| {
            Error::config("trainer.patch_size", e.to_string())
        })?;
        self.loss.validate()?;
        self.augment.validate(self.trainer.patch_size)?;
        if !self.ablation.contrastive && !self.ablation.restorative {
            return Err(Error::config(
                "ablation",
                "at least one of contrastive / restorative must be enabled",
            ));
        }
        self.finetune.validate()?;
        self.downstream.validate()?;
        self.model_config()
            .check_patch(self.downstream.patch_size)
            .map_err(|e| Error::config("downstream.patch_size", e.to_string()))?;
        Ok(())
    }

    /// Architecture actually trained, after the `arch` switch.
    pub fn model_config(&self) -> PyramidConfig {
        if self.ablation.arch {
            self.model.clone()
        } else {
            self.model.unbalanced_reference()
        }
    }

    /// Augmentations actually applied, after the `aug` switch.
    pub fn augmentation(&self) -> AugmentationSpec {
        let mut a = self.augment.clone();
        if !self.ablation.aug {
            a.shuffle.probability = 0.0;
            a.inpaint.probability = 0.0;
        }
        a
    }

    pub fn objective(&self) -> Objective {
        Objective {
            contrastive: self.ablation.contrastive,
            restorative: self.ablation.restorative,
            loss: self.loss.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string().trim().to_string()))?;
        let cfg = Self::from_table(table)?;
        let mut table: Table = Table::try_from(&cfg).expect("config serialises");
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    fn from_table(table: Table) -> Result<Self> {
        RunConfig::deserialize(Value::Table(table)).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::config(field, msg.trim().to_string())
        })
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value
/// and falls back to a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut cur = table;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::config(parts[..=i].join("."), "is not a table")
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
