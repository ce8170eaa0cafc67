//! Versioned trajectory-trace data model.
//!
//! A trace file holds one [`TraceHeader`] followed by any number of
//! [`InstanceTrace`] records. Log-probabilities and entropies are in nats.
//! Step indices are 1-based generation order inside a block.

mod io;
mod validate;
mod view;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{open_traces, read_traces, write_traces, TraceReader, TraceWriter};
pub use validate::{validate, Violation, ViolationKind};
pub use view::{TrajectoryIndex, TrajectoryView, ViewKind};

pub type TokenId = u32;

/// Trace format version implemented by this engine.
pub const FORMAT_VERSION: u32 = 1;

/// Surface string used for masked positions when rendering intermediate states.
pub const MASK_SENTINEL: &str = "␣[MASK]";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace stream has no header line")]
    MissingHeader,
    #[error("unsupported trace format version {found} (this engine reads version {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("malformed record at byte {offset}{}: {message}", instance_suffix(.instance_id))]
    Malformed {
        offset: u64,
        instance_id: Option<String>,
        message: String,
    },
    #[error("trace {instance_id} does not share the header of the first trace")]
    InconsistentHeader { instance_id: String },
    #[error("trace {instance_id} fails validation: {}", first_violation(.violations))]
    Invalid {
        instance_id: String,
        violations: Vec<Violation>,
    },
    #[error("step {step} out of range for {view} view (valid 0..={max})")]
    StepOutOfRange {
        view: String,
        step: usize,
        max: usize,
    },
    #[error("block {block} does not exist (trace has {num_blocks} blocks)")]
    NoSuchBlock { block: usize, num_blocks: usize },
    #[error("trace has no valid block to anchor the {0} view")]
    NoValidBlock(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn instance_suffix(id: &Option<String>) -> String {
    match id {
        Some(id) => format!(" (instance {id})"),
        None => String::new(),
    }
}

fn first_violation(v: &[Violation]) -> String {
    match v.first() {
        Some(first) if v.len() > 1 => format!("{first} (+{} more)", v.len() - 1),
        Some(first) => first.to_string(),
        None => "no violations".to_string(),
    }
}

/// How masked positions appear in rendered intermediate states.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRendering {
    #[default]
    Sentinel,
    Strip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    /// Surface strings indexed by dense token id.
    pub entries: Vec<String>,
    pub mask_id: TokenId,
    pub special_ids: BTreeSet<TokenId>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The mask token is always special, listed or not.
    pub fn is_special(&self, token: TokenId) -> bool {
        token == self.mask_id || self.special_ids.contains(&token)
    }

    /// Deterministic detokenization: surface strings of non-special tokens,
    /// concatenated in order. Mask tokens become [`MASK_SENTINEL`] or are
    /// dropped, depending on `masks`.
    pub fn render(&self, tokens: &[TokenId], masks: MaskRendering) -> String {
        let mut out = String::new();
        for &t in tokens {
            if t == self.mask_id {
                if masks == MaskRendering::Sentinel {
                    out.push_str(MASK_SENTINEL);
                }
            } else if !self.is_special(t) {
                if let Some(s) = self.entries.get(t as usize) {
                    out.push_str(s);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format_version: u32,
    pub model_name: String,
    pub task: String,
    pub max_steps_per_block: u32,
    pub block_length: u32,
    pub num_blocks: u32,
    pub vocab: Vocab,
}

impl Default for TraceHeader {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_name: String::new(),
            task: String::new(),
            max_steps_per_block: 1,
            block_length: 1,
            num_blocks: 1,
            vocab: Vocab {
                entries: vec!["[MASK]".to_string()],
                mask_id: 0,
                special_ids: BTreeSet::from([0]),
            },
        }
    }
}

/// Observation of one in-block position at one denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionObs {
    pub position: u32,
    /// The model's decoded prediction for this position at this step.
    pub argmax_token: TokenId,
    #[serde(with = "precise")]
    pub argmax_logprob: f64,
    /// Entropy of the full predictive distribution.
    #[serde(with = "precise")]
    pub entropy: f64,
    pub was_masked: bool,
    pub committed_now: bool,
    pub remasked_now: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub block: u32,
    /// 1-based generation order within the block.
    pub step: u32,
    pub positions: Vec<PositionObs>,
}

/// One Monte Carlo masking draw used by the masked NLL estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MCMaskSample {
    pub sample_index: u32,
    pub l: u32,
    /// Global output positions (index into the flattened final tokens).
    pub masked_positions: BTreeSet<u32>,
    #[serde(with = "precise")]
    pub sum_logprob: f64,
}

/// Externally supplied similarity for one intermediate state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecomputedSimilarity {
    pub view: ViewKind,
    pub block: u32,
    pub step: u32,
    #[serde(with = "precise")]
    pub sim: f64,
}

/// Complete recorded denoising trajectory of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceTrace {
    pub instance_id: String,
    /// Header of the file the trace belongs to; not serialized per record.
    #[serde(skip, default)]
    pub header_ref: Arc<TraceHeader>,
    pub final_tokens: Vec<Vec<TokenId>>,
    pub steps: Vec<StepRecord>,
    pub steps_per_block: Vec<u32>,
    pub nfe: u32,
    #[serde(default)]
    pub mc_samples: Vec<MCMaskSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precomputed_similarity: Option<Vec<PrecomputedSimilarity>>,
}

impl InstanceTrace {
    pub fn header(&self) -> &TraceHeader {
        &self.header_ref
    }

    pub fn vocab(&self) -> &Vocab {
        &self.header_ref.vocab
    }

    /// Final output as one flat token sequence.
    pub fn output_tokens(&self) -> Vec<TokenId> {
        self.final_tokens.iter().flatten().copied().collect()
    }

    /// Number of non-special tokens in the output, written `|y|`.
    pub fn content_len(&self) -> usize {
        let vocab = self.vocab();
        self.final_tokens
            .iter()
            .flatten()
            .filter(|&&t| !vocab.is_special(t))
            .count()
    }

    pub fn is_valid_block(&self, block: usize) -> bool {
        let vocab = self.vocab();
        self.final_tokens
            .get(block)
            .is_some_and(|b| b.iter().any(|&t| !vocab.is_special(t)))
    }

    /// Indices of blocks holding at least one non-special token.
    pub fn valid_blocks(&self) -> Vec<usize> {
        (0..self.final_tokens.len())
            .filter(|&b| self.is_valid_block(b))
            .collect()
    }

    pub fn num_valid_blocks(&self) -> usize {
        self.valid_blocks().len()
    }

    pub fn last_valid_block(&self) -> Option<usize> {
        (0..self.final_tokens.len()).rev().find(|&b| self.is_valid_block(b))
    }

    /// Step records of one block, in stored order.
    pub fn block_steps(&self, block: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.block as usize == block)
    }

    pub fn index(&self) -> TrajectoryIndex<'_> {
        TrajectoryIndex::new(self)
    }

    /// Reconstructs the argmax-decoded intermediate state under `view`.
    ///
    /// Step 0 is the state before any denoising pass.
    pub fn intermediate_sequence(
        &self,
        view: TrajectoryView,
        step: usize,
    ) -> Result<Vec<TokenId>, TraceError> {
        self.index().sequence(view, step)
    }
}

/// Serializes floats with 17 significant digits; parsing is correctly rounded.
pub(crate) mod precise {
    use serde::de::Deserialize;
    use serde::ser::Error;
    use serde::{Deserializer, Serialize, Serializer};
    use serde_json::value::RawValue;

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        if !value.is_finite() {
            return Err(S::Error::custom(format!("non-finite value {value}")));
        }
        let raw = RawValue::from_string(format!("{value:.16e}")).map_err(S::Error::custom)?;
        raw.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        f64::deserialize(deserializer)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    //! Hand-built traces shared by unit tests across modules.
    use super::*;

    pub fn vocab(content: usize) -> Vocab {
        let mut entries: Vec<String> = (0..content).map(|i| format!("w{i} ")).collect();
        entries.push("<eos>".into());
        entries.push("[MASK]".into());
        let eos = content as TokenId;
        let mask = content as TokenId + 1;
        Vocab {
            entries,
            mask_id: mask,
            special_ids: BTreeSet::from([eos, mask]),
        }
    }

    pub fn header(block_length: u32, num_blocks: u32, max_steps: u32) -> Arc<TraceHeader> {
        Arc::new(TraceHeader {
            format_version: FORMAT_VERSION,
            model_name: "fixture".into(),
            task: "unit".into(),
            max_steps_per_block: max_steps,
            block_length,
            num_blocks,
            vocab: vocab(8),
        })
    }

    /// Builds a trace from per-block step predictions and per-block commit
    /// schedules. `preds[b][t][k]` is the prediction at step t+1 for
    /// position k; `commit_at[b][k]` is the 1-based commit step.
    pub fn build(
        header: Arc<TraceHeader>,
        preds: &[Vec<Vec<TokenId>>],
        commit_at: &[Vec<u32>],
    ) -> InstanceTrace {
        let mut steps = Vec::new();
        let mut final_tokens = Vec::new();
        let mut steps_per_block = Vec::new();
        for (b, block_preds) in preds.iter().enumerate() {
            let commits = &commit_at[b];
            let mut fin = vec![0; commits.len()];
            for (t, row) in block_preds.iter().enumerate() {
                let step = t as u32 + 1;
                let positions = row
                    .iter()
                    .enumerate()
                    .map(|(k, &tok)| {
                        let c = commits[k];
                        if c == step {
                            fin[k] = tok;
                        }
                        PositionObs {
                            position: k as u32,
                            argmax_token: tok,
                            argmax_logprob: if step >= c { -0.0 } else { -0.5 },
                            entropy: if step > c { 0.0 } else { 0.7 },
                            was_masked: step <= c,
                            committed_now: step == c,
                            remasked_now: false,
                        }
                    })
                    .collect();
                steps.push(StepRecord {
                    block: b as u32,
                    step,
                    positions,
                });
            }
            final_tokens.push(fin);
            steps_per_block.push(block_preds.len() as u32);
        }
        InstanceTrace {
            instance_id: "fixture".into(),
            header_ref: header,
            nfe: steps_per_block.iter().sum(),
            final_tokens,
            steps,
            steps_per_block,
            mc_samples: Vec::new(),
            precomputed_similarity: None,
        }
    }
}
