use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{entropy, OracleError, ToyDiffusion, UnmaskPolicy};
use crate::numeric::ExactSum;
use crate::trace::{InstanceTrace, MCMaskSample, PositionObs, StepRecord, TokenId};

/// How the simulator turns the posterior into a prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Ancestral sampling: predictions are a joint posterior draw.
    #[default]
    Sample,
    /// Predictions are the joint argmax completion.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    pub decode: DecodeMode,
    /// Commit every masked position whose prediction has at least this
    /// probability, on top of the scheduled group. Lets blocks finish early.
    pub confidence_threshold: Option<f64>,
    /// 1, or 2 for a two-block layout (needs an even length).
    pub blocks: usize,
    /// Monte Carlo mask draws stored per trace.
    pub mc_samples: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            decode: DecodeMode::Sample,
            confidence_threshold: None,
            blocks: 1,
            mc_samples: 16,
        }
    }
}

impl GenOptions {
    fn check(&self, model: &ToyDiffusion) -> Result<(), OracleError> {
        match self.blocks {
            1 => {}
            2 if model.length().is_multiple_of(2) => {}
            2 => return Err(OracleError::OddLength(model.length())),
            b => return Err(OracleError::Config(format!("blocks must be 1 or 2, got {b}"))),
        }
        if let Some(t) = self.confidence_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(OracleError::Config(format!("confidence_threshold must lie in (0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

/// RNG for instance `i`: one ChaCha stream per instance, so traces do not
/// depend on how generation is scheduled.
fn instance_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Generates `n` traces; trace `i` is identical whether generated alone or
/// in a batch.
pub fn generate_traces(model: &ToyDiffusion, n: usize, options: &GenOptions) -> Result<Vec<InstanceTrace>, OracleError> {
    options.check(model)?;
    (0..n)
        .into_par_iter()
        .map(|i| generate_trace(model, i, options))
        .collect()
}

/// Generates the trace with instance number `i`.
pub fn generate_trace(model: &ToyDiffusion, i: usize, options: &GenOptions) -> Result<InstanceTrace, OracleError> {
    options.check(model)?;
    let mut rng = instance_rng(model.seed(), i);
    let header = model.header(options.blocks);
    let l = model.length();
    let lb = l / options.blocks;
    let t_max = model.steps();
    let group = lb.div_ceil(t_max);
    let mut z: Vec<Option<TokenId>> = vec![None; l];
    let mut steps = Vec::new();
    let mut steps_per_block = Vec::new();

    for b in 0..options.blocks {
        let range = b * lb..(b + 1) * lb;
        let mut step = 0;
        while range.clone().any(|k| z[k].is_none()) {
            step += 1;
            let post = model.exact_posterior(&z)?;
            let prediction = match options.decode {
                DecodeMode::Sample => model.sample_completion(&z, &mut rng)?,
                DecodeMode::Greedy => post.argmax.clone(),
            };
            let confidence = |k: usize| post.marginals[k][prediction[k] as usize];
            let mut masked: Vec<usize> = range.clone().filter(|&k| z[k].is_none()).collect();
            let commit: BTreeSet<usize> = if step >= t_max {
                masked.iter().copied().collect()
            } else {
                match model.unmask_policy() {
                    UnmaskPolicy::RandomOrder => masked.shuffle(&mut rng),
                    UnmaskPolicy::ConfidenceOrder => {
                        masked.sort_by(|&a, &c| confidence(c).total_cmp(&confidence(a)).then(a.cmp(&c)))
                    }
                }
                let mut set: BTreeSet<usize> = masked.iter().take(group).copied().collect();
                if let Some(threshold) = options.confidence_threshold {
                    set.extend(masked.iter().copied().filter(|&k| confidence(k) >= threshold));
                }
                set
            };
            let positions = range
                .clone()
                .map(|k| {
                    let position = (k - range.start) as u32;
                    match z[k] {
                        Some(token) => PositionObs {
                            position,
                            argmax_token: token,
                            argmax_logprob: 0.0,
                            entropy: 0.0,
                            was_masked: false,
                            committed_now: false,
                            remasked_now: false,
                        },
                        None => PositionObs {
                            position,
                            argmax_token: prediction[k],
                            argmax_logprob: confidence(k).ln(),
                            entropy: entropy(&post.marginals[k]),
                            was_masked: true,
                            committed_now: commit.contains(&k),
                            remasked_now: !commit.contains(&k),
                        },
                    }
                })
                .collect();
            steps.push(StepRecord {
                block: b as u32,
                step: step as u32,
                positions,
            });
            for &k in &commit {
                z[k] = Some(prediction[k]);
            }
        }
        steps_per_block.push(step as u32);
    }

    let y: Vec<TokenId> = z.iter().map(|t| t.expect("every position committed")).collect();
    let mc = mc_samples(model, &y, options.mc_samples, &mut rng)?;
    Ok(InstanceTrace {
        instance_id: format!("sim-{i:06}"),
        header_ref: header,
        final_tokens: y.chunks(lb).map(<[TokenId]>::to_vec).collect(),
        nfe: steps_per_block.iter().sum(),
        steps,
        steps_per_block,
        mc_samples: mc,
        precomputed_similarity: None,
    })
}

/// `Σ_{i∈M} ln p(y_i | y with M masked)` for every mask bitmask M.
fn subset_logprobs(model: &ToyDiffusion, y: &[TokenId]) -> Result<Vec<f64>, OracleError> {
    let l = y.len();
    (0..1usize << l)
        .map(|bits| {
            let z: Vec<Option<TokenId>> = (0..l).map(|i| (bits >> i & 1 == 0).then_some(y[i])).collect();
            let post = model.exact_posterior(&z)?;
            Ok((0..l)
                .filter(|i| bits >> i & 1 == 1)
                .map(|i| post.marginals[i][y[i] as usize].ln())
                .sum())
        })
        .collect()
}

/// Monte Carlo mask draws for the masked-diffusion NLL of output `y`:
/// `l ~ U{1..|y|}`, then a uniform subset of `l` positions.
pub fn mc_samples<R: Rng>(
    model: &ToyDiffusion,
    y: &[TokenId],
    n: usize,
    rng: &mut R,
) -> Result<Vec<MCMaskSample>, OracleError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let table = subset_logprobs(model, y)?;
    Ok((0..n)
        .map(|m| {
            let l = rng.random_range(1..=y.len());
            let positions: BTreeSet<u32> = index::sample(rng, y.len(), l).into_iter().map(|i| i as u32).collect();
            let bits = positions.iter().fold(0usize, |acc, &i| acc | 1 << i);
            MCMaskSample {
                sample_index: m as u32,
                l: l as u32,
                masked_positions: positions,
                sum_logprob: table[bits],
            }
        })
        .collect())
}

/// Expected value of the MCNLL estimator for output `y`, by enumerating
/// every (l, subset) pair under the sampling law.
pub fn mcnll_surrogate_exact(model: &ToyDiffusion, y: &[TokenId]) -> Result<f64, OracleError> {
    let l = y.len();
    let table = subset_logprobs(model, y)?;
    let binom = |k: usize| (1..=k).fold(1.0, |acc, j| acc * (l - k + j) as f64 / j as f64);
    let mut acc = ExactSum::new();
    for (bits, &s) in table.iter().enumerate().skip(1) {
        let k = bits.count_ones() as usize;
        // P(l = k) · P(subset | k) · (|y| / k) · (−s)
        acc.add(-s / (binom(k) * k as f64));
    }
    Ok(acc.value())
}
