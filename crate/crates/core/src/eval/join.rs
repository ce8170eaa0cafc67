use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRecord};
use crate::signals::UncertaintyReport;

/// One line of a quality file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityRecord {
    pub instance_id: String,
    pub quality: f64,
}

/// Reads a JSON Lines quality file; blank lines are skipped.
pub fn read_qualities<R: BufRead>(source: R) -> Result<Vec<QualityRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QualityRecord = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinStats {
    pub matched: usize,
    pub unmatched_reports: usize,
    pub unmatched_qualities: usize,
    /// Matched instances dropped because the signal is missing or undefined.
    pub excluded: usize,
}

/// Inner join on instance_id for one signal. Output follows report order.
pub fn join(
    reports: &[UncertaintyReport],
    qualities: &[QualityRecord],
    signal: &str,
) -> Result<(Vec<EvalRecord>, JoinStats), EvalError> {
    let mut quality_by_id = HashMap::with_capacity(qualities.len());
    for q in qualities {
        if quality_by_id.insert(q.instance_id.as_str(), q.quality).is_some() {
            return Err(EvalError::DuplicateId {
                side: "quality file",
                instance_id: q.instance_id.clone(),
            });
        }
    }
    let mut seen = HashSet::with_capacity(reports.len());
    let mut stats = JoinStats::default();
    let mut records = Vec::new();
    for r in reports {
        if !seen.insert(r.instance_id.as_str()) {
            return Err(EvalError::DuplicateId {
                side: "uncertainty reports",
                instance_id: r.instance_id.clone(),
            });
        }
        let Some(&quality) = quality_by_id.get(r.instance_id.as_str()) else {
            stats.unmatched_reports += 1;
            continue;
        };
        stats.matched += 1;
        match r.signals.get(signal) {
            Some(e) if e.well_defined && e.value.is_finite() => {
                records.push(EvalRecord::new(&r.instance_id, quality, e.value))
            }
            _ => stats.excluded += 1,
        }
    }
    stats.unmatched_qualities = qualities.len() - stats.matched;
    Ok((records, stats))
}

/// Quality thresholds that binarize task metrics for ROC-AUC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPreset {
    Qa,
    Summ,
    Mt,
    Accuracy,
}

impl TaskPreset {
    pub const ALL: [TaskPreset; 4] = [TaskPreset::Qa, TaskPreset::Summ, TaskPreset::Mt, TaskPreset::Accuracy];

    pub fn threshold(self) -> f64 {
        match self {
            TaskPreset::Qa | TaskPreset::Summ => 0.3,
            TaskPreset::Mt => 0.8,
            TaskPreset::Accuracy => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskPreset::Qa => "qa",
            TaskPreset::Summ => "summ",
            TaskPreset::Mt => "mt",
            TaskPreset::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for TaskPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown preset '{s}' (expected qa, summ, mt or accuracy)"))
    }
}

/// One metric value as written by `eval` and merged by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOutput {
    pub signal: String,
    /// `prr` or `roc_auc`.
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub degenerate: bool,
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}
