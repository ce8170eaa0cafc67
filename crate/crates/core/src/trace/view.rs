use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{InstanceTrace, StepRecord, TokenId, TraceError};

/// The four ways of reading a semi-autoregressive trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    /// Each block's trajectory on its own.
    Block,
    /// Only the last valid block.
    Last,
    /// Earlier blocks frozen at their final state, last valid block varying.
    LastPrefix,
    /// All blocks in global step order.
    Full,
}

impl ViewKind {
    pub const ALL: [ViewKind; 4] = [
        ViewKind::Block,
        ViewKind::Last,
        ViewKind::LastPrefix,
        ViewKind::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Block => "block",
            ViewKind::Last => "last",
            ViewKind::LastPrefix => "last_prefix",
            ViewKind::Full => "full",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ViewKind::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown trajectory view '{s}'"))
    }
}

/// A concrete trajectory: a view kind plus, for block views, the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryView {
    Block(usize),
    Last,
    LastPrefix,
    Full,
}

impl TrajectoryView {
    pub fn kind(self) -> ViewKind {
        match self {
            TrajectoryView::Block(_) => ViewKind::Block,
            TrajectoryView::Last => ViewKind::Last,
            TrajectoryView::LastPrefix => ViewKind::LastPrefix,
            TrajectoryView::Full => ViewKind::Full,
        }
    }
}

impl fmt::Display for TrajectoryView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrajectoryView::Block(b) => write!(f, "block({b})"),
            other => f.write_str(other.kind().as_str()),
        }
    }
}

/// Per-block step lookup built once per trace.
///
/// A position's state at step `t` is its final token once it has committed
/// (commit step `<= t`) and the step's decoded prediction before that.
#[derive(Debug)]
pub struct TrajectoryIndex<'a> {
    trace: &'a InstanceTrace,
    blocks: Vec<Vec<&'a StepRecord>>,
    /// 1-based ordinal of the commit step within the block, per position.
    commit_step: Vec<Vec<Option<usize>>>,
}

impl<'a> TrajectoryIndex<'a> {
    pub fn new(trace: &'a InstanceTrace) -> Self {
        let num_blocks = trace.final_tokens.len();
        let mut blocks: Vec<Vec<&StepRecord>> = vec![Vec::new(); num_blocks];
        for s in &trace.steps {
            if let Some(b) = blocks.get_mut(s.block as usize) {
                b.push(s);
            }
        }
        for b in &mut blocks {
            b.sort_by_key(|s| s.step);
        }
        let commit_step = blocks
            .iter()
            .enumerate()
            .map(|(b, steps)| {
                let len = trace.final_tokens[b].len();
                let mut commits = vec![None; len];
                for (ordinal, s) in steps.iter().enumerate() {
                    for obs in s.positions.iter().filter(|o| o.committed_now) {
                        if let Some(c) = commits.get_mut(obs.position as usize) {
                            c.get_or_insert(ordinal + 1);
                        }
                    }
                }
                commits
            })
            .collect();
        Self {
            trace,
            blocks,
            commit_step,
        }
    }

    pub fn trace(&self) -> &'a InstanceTrace {
        self.trace
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Steps of one block sorted by step index.
    pub fn block_steps(&self, block: usize) -> &[&'a StepRecord] {
        self.blocks.get(block).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn commit_step(&self, block: usize, position: usize) -> Option<usize> {
        self.commit_step.get(block)?.get(position).copied().flatten()
    }

    fn last_block(&self, view: TrajectoryView) -> Result<usize, TraceError> {
        self.trace
            .last_valid_block()
            .ok_or_else(|| TraceError::NoValidBlock(view.to_string()))
    }

    fn check_block(&self, block: usize) -> Result<(), TraceError> {
        if block < self.blocks.len() {
            Ok(())
        } else {
            Err(TraceError::NoSuchBlock {
                block,
                num_blocks: self.blocks.len(),
            })
        }
    }

    /// Number of denoising steps along the view's trajectory.
    pub fn num_steps(&self, view: TrajectoryView) -> Result<usize, TraceError> {
        match view {
            TrajectoryView::Block(b) => {
                self.check_block(b)?;
                Ok(self.blocks[b].len())
            }
            TrajectoryView::Last | TrajectoryView::LastPrefix => {
                Ok(self.blocks[self.last_block(view)?].len())
            }
            TrajectoryView::Full => Ok(self.blocks.iter().map(Vec::len).sum()),
        }
    }

    /// State of block `b` after its `t`-th step (t = 0: fully masked).
    fn block_state(&self, b: usize, t: usize) -> Vec<TokenId> {
        let fin = &self.trace.final_tokens[b];
        let mask = self.trace.vocab().mask_id;
        if t == 0 {
            return vec![mask; fin.len()];
        }
        let mut state = vec![mask; fin.len()];
        if let Some(step) = self.blocks[b].get(t - 1) {
            for obs in &step.positions {
                if let Some(slot) = state.get_mut(obs.position as usize) {
                    *slot = obs.argmax_token;
                }
            }
        }
        for (k, slot) in state.iter_mut().enumerate() {
            if self.commit_step(b, k).is_some_and(|c| c <= t) {
                *slot = fin[k];
            }
        }
        state
    }

    /// Intermediate sequence at `step` under `view`.
    pub fn sequence(&self, view: TrajectoryView, step: usize) -> Result<Vec<TokenId>, TraceError> {
        let max = self.num_steps(view)?;
        if step > max {
            return Err(TraceError::StepOutOfRange {
                view: view.to_string(),
                step,
                max,
            });
        }
        let fin = &self.trace.final_tokens;
        Ok(match view {
            TrajectoryView::Block(b) => self.block_state(b, step),
            TrajectoryView::Last => self.block_state(self.last_block(view)?, step),
            TrajectoryView::LastPrefix => {
                let last = self.last_block(view)?;
                let mut seq: Vec<TokenId> = fin[..last].iter().flatten().copied().collect();
                seq.extend(self.block_state(last, step));
                seq
            }
            TrajectoryView::Full => {
                let mut seq = Vec::new();
                let mut remaining = step;
                for (b, steps) in self.blocks.iter().enumerate() {
                    let taken = remaining.min(steps.len());
                    seq.extend(self.block_state(b, taken));
                    remaining -= taken;
                }
                seq
            }
        })
    }

    /// The view's reference output: what its trajectory converges to.
    pub fn reference(&self, view: TrajectoryView) -> Result<Vec<TokenId>, TraceError> {
        let fin = &self.trace.final_tokens;
        Ok(match view {
            TrajectoryView::Block(b) => {
                self.check_block(b)?;
                fin[b].clone()
            }
            TrajectoryView::Last => fin[self.last_block(view)?].clone(),
            TrajectoryView::LastPrefix => {
                let last = self.last_block(view)?;
                fin[..=last].iter().flatten().copied().collect()
            }
            TrajectoryView::Full => fin.iter().flatten().copied().collect(),
        })
    }

    /// Block and in-block step that global step `s` (1-based) of the full
    /// view falls on.
    pub fn full_step_location(&self, s: usize) -> Option<(usize, usize)> {
        let mut remaining = s;
        for (b, steps) in self.blocks.iter().enumerate() {
            if remaining <= steps.len() && remaining > 0 {
                return Some((b, remaining));
            }
            remaining -= steps.len().min(remaining);
        }
        None
    }
}
