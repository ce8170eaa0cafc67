//! Signal selection and per-instance scoring across all signal families.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cocoa::{self, CocoaConfig, InfoSignal};
use crate::dissimilarity::{self, ADConfig, DissimilarityError};
use crate::signals::{self, SignalError, SignalName, SignalOptions, SignalValue, UncertaintyReport};
use crate::similarity::{MaskRendering, SimilarityProvider};
use crate::trace::{InstanceTrace, ViewKind};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("unknown signal '{0}'")]
    UnknownSignal(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dissimilarity(#[from] DissimilarityError),
}

/// A user-defined D-CoCoA variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoaSpec {
    pub name: String,
    pub info_signal: InfoSignal,
    pub view: ViewKind,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub include_nfe: bool,
}

impl CocoaSpec {
    pub fn local() -> Self {
        Self {
            name: cocoa::LOCAL_NAME.into(),
            info_signal: InfoSignal::CommitNll,
            view: ViewKind::Block,
            weighted: false,
            include_nfe: false,
        }
    }

    pub fn global() -> Self {
        Self {
            name: cocoa::GLOBAL_NAME.into(),
            info_signal: InfoSignal::McnllNorm,
            view: ViewKind::Full,
            weighted: false,
            include_nfe: true,
        }
    }

    pub fn config(&self, provider: Arc<SimilarityProvider>, render_masks: MaskRendering) -> CocoaConfig {
        CocoaConfig {
            info_signal: self.info_signal,
            consistency: ADConfig {
                view: self.view,
                weighted: self.weighted,
                render_masks,
                provider,
            },
            include_nfe: self.include_nfe,
            variant_name: self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalSpec {
    Builtin(SignalName),
    Ad { view: ViewKind, weighted: bool },
    Cocoa(CocoaSpec),
}

impl SignalSpec {
    pub fn name(&self) -> String {
        match self {
            SignalSpec::Builtin(n) => n.as_str().to_string(),
            SignalSpec::Ad { view, weighted } => dissimilarity::signal_name(*view, *weighted),
            SignalSpec::Cocoa(c) => c.name.clone(),
        }
    }

    fn view(&self) -> Option<ViewKind> {
        match self {
            SignalSpec::Builtin(_) => None,
            SignalSpec::Ad { view, .. } => Some(*view),
            SignalSpec::Cocoa(c) => Some(c.view),
        }
    }

    /// Every catalog signal, all AD variants and both named D-CoCoA scores.
    pub fn all() -> Vec<SignalSpec> {
        let mut specs: Vec<SignalSpec> = SignalName::ALL.into_iter().map(SignalSpec::Builtin).collect();
        for weighted in [false, true] {
            specs.extend(ViewKind::ALL.into_iter().map(|view| SignalSpec::Ad { view, weighted }));
        }
        specs.push(SignalSpec::Cocoa(CocoaSpec::local()));
        specs.push(SignalSpec::Cocoa(CocoaSpec::global()));
        specs
    }
}

impl fmt::Display for SignalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for SignalSpec {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(n) = s.parse::<SignalName>() {
            return Ok(SignalSpec::Builtin(n));
        }
        if s == cocoa::LOCAL_NAME {
            return Ok(SignalSpec::Cocoa(CocoaSpec::local()));
        }
        if s == cocoa::GLOBAL_NAME {
            return Ok(SignalSpec::Cocoa(CocoaSpec::global()));
        }
        if let Some(rest) = s.strip_prefix("ad_") {
            let (view, weighted) = match rest.strip_suffix("_prog") {
                Some(v) => (v, true),
                None => (rest, false),
            };
            if let Ok(view) = view.parse::<ViewKind>() {
                return Ok(SignalSpec::Ad { view, weighted });
            }
        }
        Err(ScoreError::UnknownSignal(s.to_string()))
    }
}

/// Scores traces against a fixed signal selection. Step dissimilarities are
/// computed once per (trace, view) and shared by every signal that needs
/// them.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub specs: Vec<SignalSpec>,
    pub provider: Arc<SimilarityProvider>,
    pub render_masks: MaskRendering,
    pub options: SignalOptions,
}

impl Scorer {
    pub fn new(specs: Vec<SignalSpec>, provider: Arc<SimilarityProvider>) -> Self {
        Self {
            specs,
            provider,
            render_masks: MaskRendering::default(),
            options: SignalOptions::default(),
        }
    }

    fn ad_value(steps: &[Vec<f64>], weighted: bool, name: &str) -> SignalValue {
        match dissimilarity::exact_bounds(steps) {
            Some(b) => SignalValue::defined(
                name,
                dissimilarity::to_f64(if weighted { &b.progressive } else { &b.ad }),
            ),
            None => SignalValue::undefined(name),
        }
    }

    pub fn score(&self, trace: &InstanceTrace) -> Result<UncertaintyReport, ScoreError> {
        let mut steps: HashMap<ViewKind, Vec<Vec<f64>>> = HashMap::new();
        for view in self.specs.iter().filter_map(SignalSpec::view) {
            if let std::collections::hash_map::Entry::Vacant(e) = steps.entry(view) {
                e.insert(dissimilarity::step_dissimilarities(
                    trace,
                    view,
                    self.render_masks,
                    &self.provider,
                )?);
            }
        }
        let mut report = UncertaintyReport::new(&trace.instance_id);
        for spec in &self.specs {
            let value = match spec {
                SignalSpec::Builtin(n) => signals::compute(trace, *n, self.options)?,
                SignalSpec::Ad { view, weighted } => {
                    Self::ad_value(&steps[view], *weighted, &spec.name())
                }
                SignalSpec::Cocoa(c) => {
                    let info = signals::compute(trace, c.info_signal.into(), self.options)?;
                    let ad = Self::ad_value(&steps[&c.view], c.weighted, "ad");
                    let nfe = c.include_nfe.then(|| signals::nfe(trace));
                    cocoa::combine(&c.name, &info, &ad, nfe.as_ref())
                }
            };
            report.insert(value);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::fixtures::{build, header};

    #[test]
    fn parses_every_family() {
        assert_eq!("nfe".parse::<SignalSpec>().unwrap(), SignalSpec::Builtin(SignalName::Nfe));
        assert_eq!(
            "ad_last_prefix_prog".parse::<SignalSpec>().unwrap(),
            SignalSpec::Ad { view: ViewKind::LastPrefix, weighted: true }
        );
        assert_eq!(
            "ad_block".parse::<SignalSpec>().unwrap(),
            SignalSpec::Ad { view: ViewKind::Block, weighted: false }
        );
        assert_eq!("d_cocoa_l".parse::<SignalSpec>().unwrap(), SignalSpec::Cocoa(CocoaSpec::local()));
        assert!("ad_middle".parse::<SignalSpec>().is_err());
        assert!("perplexity".parse::<SignalSpec>().is_err());
        for spec in SignalSpec::all() {
            assert_eq!(spec.name().parse::<SignalSpec>().unwrap(), spec);
        }
    }

    #[test]
    fn scorer_matches_direct_calls() {
        let t = build(
            header(3, 1, 3),
            &[vec![vec![1, 5, 7], vec![1, 2, 7], vec![1, 2, 3]]],
            &[vec![1, 2, 3]],
        );
        let provider = Arc::new(SimilarityProvider::TokenLcs);
        let scorer = Scorer::new(SignalSpec::all(), provider.clone());
        let report = scorer.score(&t).unwrap();
        assert_eq!(report.signals.len(), SignalSpec::all().len());
        let local = cocoa::d_cocoa_local(&t, provider.clone()).unwrap();
        assert_eq!(report.get("d_cocoa_l").unwrap().value.to_bits(), local.value.to_bits());
        let prog = dissimilarity::progressive_dissimilarity(
            &t,
            &ADConfig::new(ViewKind::Full, provider),
        )
        .unwrap();
        assert_eq!(report.get("ad_full_prog").unwrap().value, prog.value);
        assert!(!report.get("mcnll").unwrap().well_defined);
    }

    #[test]
    fn cocoa_spec_rejects_unknown_keys() {
        let ok: CocoaSpec =
            serde_json::from_str(r#"{"name":"x","info_signal":"traj_nll","view":"last"}"#).unwrap();
        assert_eq!(ok.info_signal, InfoSignal::TrajNll);
        assert!(serde_json::from_str::<CocoaSpec>(r#"{"name":"x","info_signal":"nfe","view":"last"}"#).is_err());
        assert!(serde_json::from_str::<CocoaSpec>(
            r#"{"name":"x","info_signal":"mcnll","view":"last","extra":1}"#
        )
        .is_err());
    }
}
