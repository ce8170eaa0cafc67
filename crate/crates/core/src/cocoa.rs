//! D-CoCoA: an information-based signal multiplied by trajectory
//! dissimilarity, optionally scaled by the number of forward passes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dissimilarity::{self, ADConfig, DissimilarityError};
use crate::signals::{self, SignalError, SignalName, SignalOptions, SignalValue};
use crate::similarity::SimilarityProvider;
use crate::trace::{InstanceTrace, ViewKind};

pub const LOCAL_NAME: &str = "d_cocoa_l";
pub const GLOBAL_NAME: &str = "d_cocoa_g";

#[derive(Debug, Error)]
pub enum CocoaError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dissimilarity(#[from] DissimilarityError),
}

/// Signals allowed as the information factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoSignal {
    Mcnll,
    McnllNorm,
    TrajNll,
    TrajEntropy,
    CommitNll,
}

impl From<InfoSignal> for SignalName {
    fn from(s: InfoSignal) -> Self {
        match s {
            InfoSignal::Mcnll => SignalName::Mcnll,
            InfoSignal::McnllNorm => SignalName::McnllNorm,
            InfoSignal::TrajNll => SignalName::TrajNll,
            InfoSignal::TrajEntropy => SignalName::TrajEntropy,
            InfoSignal::CommitNll => SignalName::CommitNll,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CocoaConfig {
    pub info_signal: InfoSignal,
    pub consistency: ADConfig,
    pub include_nfe: bool,
    /// Name the score is reported under.
    pub variant_name: String,
}

impl CocoaConfig {
    /// Commit-time NLL times block-averaged AD.
    pub fn local(provider: Arc<SimilarityProvider>) -> Self {
        Self {
            info_signal: InfoSignal::CommitNll,
            consistency: ADConfig::new(ViewKind::Block, provider),
            include_nfe: false,
            variant_name: LOCAL_NAME.to_string(),
        }
    }

    /// Length-normalized MCNLL times NFE times full-trajectory AD.
    pub fn global(provider: Arc<SimilarityProvider>) -> Self {
        Self {
            info_signal: InfoSignal::McnllNorm,
            consistency: ADConfig::new(ViewKind::Full, provider),
            include_nfe: true,
            variant_name: GLOBAL_NAME.to_string(),
        }
    }
}

/// `info · (nfe · AD)` or `info · AD`; undefined if any factor is.
pub fn combine(name: &str, info: &SignalValue, ad: &SignalValue, nfe: Option<&SignalValue>) -> SignalValue {
    let consistency = match nfe {
        Some(n) if !n.well_defined => return SignalValue::undefined(name),
        Some(n) => n.value * ad.value,
        None => ad.value,
    };
    if !info.well_defined || !ad.well_defined {
        return SignalValue::undefined(name);
    }
    SignalValue::defined(name, info.value * consistency)
}

pub fn d_cocoa(
    trace: &InstanceTrace,
    config: &CocoaConfig,
    options: SignalOptions,
) -> Result<SignalValue, CocoaError> {
    let info = signals::compute(trace, config.info_signal.into(), options)?;
    let ad = dissimilarity::average_dissimilarity(trace, &config.consistency)?;
    let nfe = config.include_nfe.then(|| signals::nfe(trace));
    Ok(combine(&config.variant_name, &info, &ad, nfe.as_ref()))
}

pub fn d_cocoa_local(
    trace: &InstanceTrace,
    provider: Arc<SimilarityProvider>,
) -> Result<SignalValue, CocoaError> {
    d_cocoa(trace, &CocoaConfig::local(provider), SignalOptions::default())
}

pub fn d_cocoa_global(
    trace: &InstanceTrace,
    provider: Arc<SimilarityProvider>,
) -> Result<SignalValue, CocoaError> {
    d_cocoa(trace, &CocoaConfig::global(provider), SignalOptions::default())
}
