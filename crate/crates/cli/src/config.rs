//! Run configuration: a strict JSON file whose every field can be
//! overridden from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dlmuq_core::eval::TaskPreset;
use dlmuq_core::scoring::{CocoaSpec, SignalSpec};
use dlmuq_core::signals::RemaskMode;
use dlmuq_core::{MaskRendering, ProviderConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that replaces the remote similarity endpoint.
pub const ENDPOINT_ENV: &str = "DLMUQ_SIM_ENDPOINT";

/// A signal as written in the config: a catalog name or a custom variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignalEntry {
    Name(String),
    Cocoa(CocoaSpec),
}

impl SignalEntry {
    pub fn spec(&self) -> Result<SignalSpec> {
        Ok(match self {
            SignalEntry::Name(n) => n.parse()?,
            SignalEntry::Cocoa(c) => SignalSpec::Cocoa(c.clone()),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Prr,
    RocAuc,
    /// Both metrics.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metric: Metric,
    pub preset: Option<TaskPreset>,
    /// Explicit ROC-AUC threshold; wins over the preset's.
    pub threshold: Option<f64>,
    pub max_reject: f64,
    /// Dataset label carried into metric files.
    pub dataset: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metric: Metric::Prr,
            preset: None,
            threshold: None,
            max_reject: dlmuq_core::eval::DEFAULT_MAX_REJECT,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub traces: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub qualities: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub signals: Vec<SignalEntry>,
    pub provider: ProviderConfig,
    pub render_masks: MaskRendering,
    pub remask_mode: RemaskMode,
    pub eval: EvalSection,
    pub io: IoSection,
    pub seed: Option<u64>,
    /// Simulator settings in the simulator's own schema; merged with flags.
    pub simulate: Option<serde_json::Map<String, serde_json::Value>>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the endpoint environment override.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.is_empty() {
                self.provider.endpoint = Some(url);
            }
        }
    }

    pub fn signal_specs(&self) -> Result<Vec<SignalSpec>> {
        if self.signals.is_empty() {
            return Ok(SignalSpec::all());
        }
        let specs = self.signals.iter().map(SignalEntry::spec).collect::<Result<Vec<_>>>()?;
        let mut names: Vec<String> = specs.iter().map(SignalSpec::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("signal '{}' requested twice", w[0]);
        }
        Ok(specs)
    }
}

/// Fails early when any input path is missing.
pub fn require_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            bail!("input file {} does not exist", p.display());
        }
    }
    Ok(())
}

/// Comma-separated signal list from the command line.
pub fn parse_signal_list(list: &str) -> Result<Vec<SignalEntry>> {
    let entries: Vec<SignalEntry> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| SignalEntry::Name(s.to_string()))
        .collect();
    for e in &entries {
        e.spec()?;
    }
    Ok(entries)
}
