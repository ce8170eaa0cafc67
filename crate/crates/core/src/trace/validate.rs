use std::fmt;

use serde::Serialize;

use super::{InstanceTrace, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    FormatVersion,
    HeaderShape,
    VocabIds,
    FinalTokensShape,
    TokenOutOfVocab,
    StepsPerBlock,
    Nfe,
    StepOrder,
    StepPositions,
    Logprob,
    Entropy,
    CommitWithoutMask,
    CommitAndRemask,
    CommitCount,
    CommitToken,
    McSample,
    Similarity,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::FormatVersion => "format_version",
            ViolationKind::HeaderShape => "header_shape",
            ViolationKind::VocabIds => "vocab_ids",
            ViolationKind::FinalTokensShape => "final_tokens_shape",
            ViolationKind::TokenOutOfVocab => "token_out_of_vocab",
            ViolationKind::StepsPerBlock => "steps_per_block",
            ViolationKind::Nfe => "nfe",
            ViolationKind::StepOrder => "step_order",
            ViolationKind::StepPositions => "step_positions",
            ViolationKind::Logprob => "argmax_logprob",
            ViolationKind::Entropy => "entropy",
            ViolationKind::CommitWithoutMask => "commit_without_mask",
            ViolationKind::CommitAndRemask => "commit_and_remask",
            ViolationKind::CommitCount => "commit_count",
            ViolationKind::CommitToken => "commit_token",
            ViolationKind::McSample => "mc_sample",
            ViolationKind::Similarity => "precomputed_similarity",
        }
    }
}

/// One broken invariant, with where it was found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.kind.as_str(), self.location, self.message)
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(&mut self, kind: ViolationKind, location: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation {
            kind,
            location: location.into(),
            message: message.into(),
        });
    }
}

/// Checks every structural invariant of a trace. Returns an empty list iff
/// the trace is well-formed.
pub fn validate(trace: &InstanceTrace) -> Vec<Violation> {
    let mut v = Collector(Vec::new());
    let header = trace.header();
    let vocab = &header.vocab;
    let vocab_len = vocab.len() as u64;

    if header.format_version != FORMAT_VERSION {
        v.push(
            ViolationKind::FormatVersion,
            "header",
            format!("version {} != {FORMAT_VERSION}", header.format_version),
        );
    }
    if header.max_steps_per_block == 0 || header.block_length == 0 || header.num_blocks == 0 {
        v.push(
            ViolationKind::HeaderShape,
            "header",
            "max_steps_per_block, block_length and num_blocks must be positive",
        );
    }
    if u64::from(vocab.mask_id) >= vocab_len {
        v.push(ViolationKind::VocabIds, "header.vocab", "mask_id outside entries");
    }
    if let Some(bad) = vocab.special_ids.iter().find(|&&s| u64::from(s) >= vocab_len) {
        v.push(
            ViolationKind::VocabIds,
            "header.vocab",
            format!("special id {bad} outside entries"),
        );
    }

    let num_blocks = header.num_blocks as usize;
    let block_len = header.block_length as usize;
    if trace.final_tokens.len() != num_blocks {
        v.push(
            ViolationKind::FinalTokensShape,
            "final_tokens",
            format!("{} blocks, header says {num_blocks}", trace.final_tokens.len()),
        );
    }
    for (b, block) in trace.final_tokens.iter().enumerate() {
        if block.len() != block_len {
            v.push(
                ViolationKind::FinalTokensShape,
                format!("final_tokens[{b}]"),
                format!("length {} != block_length {block_len}", block.len()),
            );
        }
        for (k, &tok) in block.iter().enumerate() {
            if u64::from(tok) >= vocab_len {
                v.push(
                    ViolationKind::TokenOutOfVocab,
                    format!("final_tokens[{b}][{k}]"),
                    format!("token {tok}"),
                );
            } else if tok == vocab.mask_id {
                v.push(
                    ViolationKind::FinalTokensShape,
                    format!("final_tokens[{b}][{k}]"),
                    "output contains the mask token",
                );
            }
        }
    }

    if trace.steps_per_block.len() != trace.final_tokens.len() {
        v.push(
            ViolationKind::StepsPerBlock,
            "steps_per_block",
            format!(
                "{} entries for {} blocks",
                trace.steps_per_block.len(),
                trace.final_tokens.len()
            ),
        );
    }
    for (b, &tb) in trace.steps_per_block.iter().enumerate() {
        if tb > header.max_steps_per_block {
            v.push(
                ViolationKind::StepsPerBlock,
                format!("steps_per_block[{b}]"),
                format!("{tb} exceeds max_steps_per_block {}", header.max_steps_per_block),
            );
        }
    }
    let total: u64 = trace.steps_per_block.iter().map(|&t| u64::from(t)).sum();
    if u64::from(trace.nfe) != total {
        v.push(
            ViolationKind::Nfe,
            "nfe",
            format!("nfe {} != sum of steps_per_block {total}", trace.nfe),
        );
    }

    // Steps must be sorted by (block, step) with steps 1..=T_b per block.
    let mut expected_next: Vec<u32> = vec![1; trace.final_tokens.len()];
    let mut last_block = 0u32;
    for (i, s) in trace.steps.iter().enumerate() {
        let loc = format!("steps[{i}] (block {}, step {})", s.block, s.step);
        let b = s.block as usize;
        if b >= trace.final_tokens.len() {
            v.push(ViolationKind::StepOrder, loc, "block index out of range");
            continue;
        }
        if s.block < last_block || s.step != expected_next[b] {
            v.push(
                ViolationKind::StepOrder,
                loc.clone(),
                format!("expected step {} of block {b} in generation order", expected_next[b]),
            );
        }
        last_block = last_block.max(s.block);
        expected_next[b] = s.step.saturating_add(1);

        let len = trace.final_tokens[b].len();
        let sorted = s.positions.len() == len
            && s.positions.iter().enumerate().all(|(k, o)| o.position as usize == k);
        if !sorted {
            v.push(
                ViolationKind::StepPositions,
                loc.clone(),
                format!("positions must list in-block indices 0..{len} in order"),
            );
        }
        for o in &s.positions {
            let ploc = format!("{loc} position {}", o.position);
            if u64::from(o.argmax_token) >= vocab_len {
                v.push(ViolationKind::TokenOutOfVocab, ploc.clone(), format!("token {}", o.argmax_token));
            }
            if !(o.argmax_logprob.is_finite() && o.argmax_logprob <= 0.0) {
                v.push(ViolationKind::Logprob, ploc.clone(), format!("{} not in (-inf, 0]", o.argmax_logprob));
            }
            if !(o.entropy.is_finite() && o.entropy >= 0.0) {
                v.push(ViolationKind::Entropy, ploc.clone(), format!("{} not in [0, inf)", o.entropy));
            }
            if o.committed_now && !o.was_masked {
                v.push(ViolationKind::CommitWithoutMask, ploc.clone(), "committed from an unmasked state");
            }
            if o.committed_now && o.remasked_now {
                v.push(ViolationKind::CommitAndRemask, ploc, "committed and remasked in the same step");
            }
        }
    }
    for (b, &tb) in trace.steps_per_block.iter().enumerate() {
        if let Some(&next) = expected_next.get(b) {
            if next - 1 != tb {
                v.push(
                    ViolationKind::StepsPerBlock,
                    format!("steps_per_block[{b}]"),
                    format!("declares {tb} steps, records hold {}", next - 1),
                );
            }
        }
    }

    // Exactly one commit per output position, agreeing with the final token.
    for (b, block) in trace.final_tokens.iter().enumerate() {
        for (k, &tok) in block.iter().enumerate() {
            let commits: Vec<_> = trace
                .block_steps(b)
                .filter_map(|s| {
                    s.positions
                        .iter()
                        .find(|o| o.position as usize == k && o.committed_now)
                        .map(|o| (s.step, o.argmax_token))
                })
                .collect();
            let loc = format!("block {b} position {k}");
            match commits.as_slice() {
                [(step, committed)] => {
                    if *committed != tok {
                        v.push(
                            ViolationKind::CommitToken,
                            loc,
                            format!("committed token {committed} at step {step} != final token {tok}"),
                        );
                    }
                }
                other => v.push(
                    ViolationKind::CommitCount,
                    loc,
                    format!("{} commit events (expected exactly 1)", other.len()),
                ),
            }
        }
    }

    let output_len = trace.final_tokens.iter().map(Vec::len).sum::<usize>();
    let content_len = trace.content_len();
    for (i, m) in trace.mc_samples.iter().enumerate() {
        let loc = format!("mc_samples[{i}]");
        if m.masked_positions.len() != m.l as usize {
            v.push(
                ViolationKind::McSample,
                loc.clone(),
                format!("l = {} but {} masked positions", m.l, m.masked_positions.len()),
            );
        }
        if m.l == 0 || m.l as usize > content_len {
            v.push(
                ViolationKind::McSample,
                loc.clone(),
                format!("l = {} outside 1..={content_len}", m.l),
            );
        }
        if let Some(p) = m.masked_positions.iter().find(|&&p| p as usize >= output_len) {
            v.push(ViolationKind::McSample, loc.clone(), format!("position {p} outside output"));
        }
        if !(m.sum_logprob.is_finite() && m.sum_logprob <= 0.0) {
            v.push(ViolationKind::McSample, loc, format!("sum_logprob {} not in (-inf, 0]", m.sum_logprob));
        }
    }

    for (i, s) in trace.precomputed_similarity.iter().flatten().enumerate() {
        if !(0.0..=1.0).contains(&s.sim) {
            v.push(
                ViolationKind::Similarity,
                format!("precomputed_similarity[{i}]"),
                format!("{} outside [0, 1]", s.sim),
            );
        }
    }
    v.0
}
