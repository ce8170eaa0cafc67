//! Uncertainty scoring for masked diffusion language models.
//!
//! The engine consumes recorded denoising trajectories ([`trace`]) and turns
//! them into scalar uncertainty scores ([`signals`], [`dissimilarity`],
//! [`cocoa`]). Scores are evaluated under selective generation ([`eval`]).
//! A small exactly-calibrated diffusion simulator ([`oracle`]) produces
//! reference traces and checks the trajectory-dissimilarity bounds.

pub mod cocoa;
pub mod dissimilarity;
pub mod eval;
pub mod numeric;
pub mod oracle;
pub mod scoring;
pub mod signals;
pub mod similarity;
pub mod trace;

pub use cocoa::{CocoaConfig, InfoSignal};
pub use dissimilarity::ADConfig;
pub use signals::{SignalName, SignalValue, UncertaintyReport};
pub use similarity::{MaskRendering, ProviderConfig, ProviderKind, SimilarityProvider};
pub use trace::{InstanceTrace, TraceHeader, TrajectoryView, ViewKind, Vocab};
