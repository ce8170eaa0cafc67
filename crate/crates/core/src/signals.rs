//! Likelihood- and statistics-based uncertainty signals computed from a
//! single trace. Larger values always mean more uncertain.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::numeric::ExactSum;
use crate::trace::InstanceTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("unknown signal '{0}'")]
    UnknownSignal(String),
    #[error("mc sample {index} has l = {l}, outside 1..={content_len}")]
    SampleSize {
        index: usize,
        l: u32,
        content_len: usize,
    },
    #[error("no commit record for block {block} position {position}")]
    MissingCommit { block: usize, position: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignalName {
    Mcnll,
    McnllNorm,
    TrajNll,
    TrajEntropy,
    CommitNll,
    Nfe,
    Remask,
    FlipCount,
}

impl SignalName {
    pub const ALL: [SignalName; 8] = [
        SignalName::Mcnll,
        SignalName::McnllNorm,
        SignalName::TrajNll,
        SignalName::TrajEntropy,
        SignalName::CommitNll,
        SignalName::Nfe,
        SignalName::Remask,
        SignalName::FlipCount,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalName::Mcnll => "mcnll",
            SignalName::McnllNorm => "mcnll_norm",
            SignalName::TrajNll => "traj_nll",
            SignalName::TrajEntropy => "traj_entropy",
            SignalName::CommitNll => "commit_nll",
            SignalName::Nfe => "nfe",
            SignalName::Remask => "remask",
            SignalName::FlipCount => "flip_count",
        }
    }
}

impl fmt::Display for SignalName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalName {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SignalName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| SignalError::UnknownSignal(s.to_string()))
    }
}

/// A named scalar score. `value` is NaN whenever `well_defined` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalValue {
    pub name: String,
    pub value: f64,
    pub well_defined: bool,
}

impl SignalValue {
    pub fn defined(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            // adding +0 turns a negative zero into zero
            value: value + 0.0,
            well_defined: value.is_finite(),
        }
    }

    pub fn undefined(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: f64::NAN,
            well_defined: false,
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// How the remask signal counts per-step events.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemaskMode {
    /// Positions flagged `remasked_now`.
    #[default]
    Events,
    /// Positions in masked state entering the step.
    MaskedState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SignalOptions {
    pub remask_mode: RemaskMode,
}

/// Masked-diffusion NLL estimate from the trace's Monte Carlo mask draws.
///
/// Undefined without samples and for outputs of at most one content token.
pub fn mcnll(trace: &InstanceTrace) -> Result<SignalValue, SignalError> {
    let name = SignalName::Mcnll.as_str();
    let content_len = trace.content_len();
    if trace.mc_samples.is_empty() || content_len <= 1 {
        return Ok(SignalValue::undefined(name));
    }
    let y = content_len as f64;
    let mut acc = ExactSum::new();
    for (index, sample) in trace.mc_samples.iter().enumerate() {
        if sample.l == 0 || sample.l as usize > content_len {
            return Err(SignalError::SampleSize {
                index,
                l: sample.l,
                content_len,
            });
        }
        acc.add(y / f64::from(sample.l) * -sample.sum_logprob);
    }
    Ok(SignalValue::defined(
        name,
        acc.value() / trace.mc_samples.len() as f64,
    ))
}

pub fn mcnll_norm(trace: &InstanceTrace) -> Result<SignalValue, SignalError> {
    let base = mcnll(trace)?;
    if !base.well_defined {
        return Ok(SignalValue::undefined(SignalName::McnllNorm.as_str()));
    }
    Ok(SignalValue::defined(
        SignalName::McnllNorm.as_str(),
        base.value / trace.content_len() as f64,
    ))
}

/// Mean over valid-block steps of the per-step position average of `f`.
/// Each block contributes its own step count to the normalizer.
fn trajectory_mean(trace: &InstanceTrace, f: impl Fn(&crate::trace::PositionObs) -> f64) -> Option<f64> {
    let index = trace.index();
    let mut acc = ExactSum::new();
    let mut steps = 0usize;
    for b in trace.valid_blocks() {
        let block_steps = index.block_steps(b);
        if block_steps.is_empty() {
            return None;
        }
        for s in block_steps {
            if s.positions.is_empty() {
                return None;
            }
            let step_sum: ExactSum = s.positions.iter().map(&f).collect();
            acc.add(step_sum.value() / s.positions.len() as f64);
            steps += 1;
        }
    }
    (steps > 0).then(|| acc.value() / steps as f64)
}

/// Average negative log-probability of decoded tokens along the trajectory.
pub fn traj_nll(trace: &InstanceTrace) -> SignalValue {
    let name = SignalName::TrajNll.as_str();
    match trajectory_mean(trace, |o| -o.argmax_logprob) {
        Some(v) => SignalValue::defined(name, v),
        None => SignalValue::undefined(name),
    }
}

/// Average predictive entropy along the trajectory.
pub fn traj_entropy(trace: &InstanceTrace) -> SignalValue {
    let name = SignalName::TrajEntropy.as_str();
    match trajectory_mean(trace, |o| o.entropy) {
        Some(v) => SignalValue::defined(name, v),
        None => SignalValue::undefined(name),
    }
}

/// Average negative log-probability at the step each content token commits.
pub fn commit_nll(trace: &InstanceTrace) -> Result<SignalValue, SignalError> {
    let name = SignalName::CommitNll.as_str();
    let content_len = trace.content_len();
    if content_len == 0 {
        return Ok(SignalValue::undefined(name));
    }
    let vocab = trace.vocab();
    let index = trace.index();
    let mut acc = ExactSum::new();
    for (b, block) in trace.final_tokens.iter().enumerate() {
        for (k, &tok) in block.iter().enumerate() {
            if vocab.is_special(tok) {
                continue;
            }
            let obs = index
                .commit_step(b, k)
                .and_then(|c| index.block_steps(b).get(c - 1))
                .and_then(|s| s.positions.iter().find(|o| o.position as usize == k))
                .ok_or(SignalError::MissingCommit { block: b, position: k })?;
            acc.add(-obs.argmax_logprob);
        }
    }
    Ok(SignalValue::defined(name, acc.value() / content_len as f64))
}

pub fn nfe(trace: &InstanceTrace) -> SignalValue {
    SignalValue::defined(SignalName::Nfe.as_str(), f64::from(trace.nfe))
}

/// Average number of remasked positions per forward pass.
pub fn remask(trace: &InstanceTrace, mode: RemaskMode) -> SignalValue {
    let name = SignalName::Remask.as_str();
    if trace.nfe == 0 {
        return SignalValue::undefined(name);
    }
    let count: usize = trace
        .steps
        .iter()
        .flat_map(|s| &s.positions)
        .filter(|o| match mode {
            RemaskMode::Events => o.remasked_now,
            RemaskMode::MaskedState => o.was_masked,
        })
        .count();
    SignalValue::defined(name, count as f64 / f64::from(trace.nfe))
}

/// Number of changes in the decoded prediction between consecutive steps,
/// summed over positions and divided by the content length.
pub fn flip_count(trace: &InstanceTrace) -> SignalValue {
    let name = SignalName::FlipCount.as_str();
    let content_len = trace.content_len();
    if content_len == 0 {
        return SignalValue::undefined(name);
    }
    let index = trace.index();
    let mut flips = 0usize;
    for b in 0..index.num_blocks() {
        for pair in index.block_steps(b).windows(2) {
            flips += pair[0]
                .positions
                .iter()
                .zip(&pair[1].positions)
                .filter(|(a, c)| a.argmax_token != c.argmax_token)
                .count();
        }
    }
    SignalValue::defined(name, flips as f64 / content_len as f64)
}

pub fn compute(
    trace: &InstanceTrace,
    name: SignalName,
    options: SignalOptions,
) -> Result<SignalValue, SignalError> {
    Ok(match name {
        SignalName::Mcnll => mcnll(trace)?,
        SignalName::McnllNorm => mcnll_norm(trace)?,
        SignalName::TrajNll => traj_nll(trace),
        SignalName::TrajEntropy => traj_entropy(trace),
        SignalName::CommitNll => commit_nll(trace)?,
        SignalName::Nfe => nfe(trace),
        SignalName::Remask => remask(trace, options.remask_mode),
        SignalName::FlipCount => flip_count(trace),
    })
}

/// One report entry as written to disk; `value` is null when undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportEntry {
    pub value: f64,
    pub well_defined: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportEntryWire {
    value: Option<f64>,
    well_defined: bool,
}

impl Serialize for ReportEntry {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ReportEntryWire {
            value: (self.well_defined && self.value.is_finite()).then_some(self.value),
            well_defined: self.well_defined,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ReportEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = ReportEntryWire::deserialize(d)?;
        Ok(ReportEntry {
            value: w.value.unwrap_or(f64::NAN),
            well_defined: w.well_defined && w.value.is_some(),
        })
    }
}

/// All requested scores for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyReport {
    pub instance_id: String,
    pub signals: BTreeMap<String, ReportEntry>,
}

impl UncertaintyReport {
    pub fn new(instance_id: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.into(),
            signals: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, value: SignalValue) {
        self.signals.insert(
            value.name,
            ReportEntry {
                value: value.value,
                well_defined: value.well_defined,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<SignalValue> {
        self.signals.get(name).map(|e| SignalValue {
            name: name.to_string(),
            value: e.value,
            well_defined: e.well_defined,
        })
    }
}

/// Scores the selected catalog signals. Signals whose preconditions fail
/// are reported as undefined; malformed trace data is an error.
pub fn score_all<S: AsRef<str>>(
    trace: &InstanceTrace,
    selection: &[S],
    options: SignalOptions,
) -> Result<UncertaintyReport, SignalError> {
    let names = selection
        .iter()
        .map(|s| s.as_ref().parse::<SignalName>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = UncertaintyReport::new(&trace.instance_id);
    for name in names {
        report.insert(compute(trace, name, options)?);
    }
    Ok(report)
}
