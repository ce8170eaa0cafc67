//! Toy masked diffusion with an exact, perfectly calibrated denoiser.
//!
//! The data distribution is an explicit table over `V^L` sequences, so every
//! posterior the denoiser needs is a table marginalization. The simulator
//! emits ordinary traces and the verification routines check the
//! dissimilarity bounds against quantities that are known exactly.

pub mod simulate;
pub mod theorem;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::numeric::exact_sum;
use crate::trace::{TokenId, TraceHeader, Vocab, FORMAT_VERSION};

pub use simulate::{
    generate_trace, generate_traces, mc_samples, mcnll_surrogate_exact, DecodeMode, GenOptions,
};
pub use theorem::{
    exact_step_terms, masking_loss, verify_prop1, verify_theorem1, verify_theorem1_exact, Estimate,
    LossMode, Prop1Report, StepTerms, TheoremReport,
};

/// Largest table the simulator enumerates.
pub const MAX_TABLE_SIZE: usize = 1_000_000;
/// Largest (sequence, mask pattern) count for exact loss enumeration.
pub const MAX_EXACT_PAIRS: usize = 10_000_000;
/// Tolerance on the table's total mass.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// RNG stream reserved for drawing Dirichlet tables.
const TABLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("vocab_size must be in 2..=8 and length in 2..=6 (got {vocab_size}, {length})")]
    Shape { vocab_size: usize, length: usize },
    #[error("steps must be at least 1")]
    Steps,
    #[error("table has {found} entries, expected {expected}")]
    TableSize { found: usize, expected: usize },
    #[error("table entries must be finite and non-negative and sum to 1 (sum {sum})")]
    TableMass { sum: f64 },
    #[error("dirichlet concentration must be positive and finite, got {0}")]
    Concentration(f64),
    #[error("partially masked sequence has zero probability under the table")]
    Inconsistent,
    #[error("exact enumeration needs {pairs} (sequence, mask) pairs, above the limit of {limit}; use monte_carlo mode")]
    EnumerationBound { pairs: u128, limit: usize },
    #[error("two-block mode needs an even length, got {0}")]
    OddLength(usize),
    #[error("invalid simulator configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskPolicy {
    #[default]
    RandomOrder,
    ConfidenceOrder,
}

/// Source of the data table.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Uniform,
    Dirichlet(f64),
    Table(Vec<f64>),
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Uniform => f.write_str("uniform"),
            DataSpec::Dirichlet(a) => write!(f, "dirichlet:{a}"),
            DataSpec::Table(t) => write!(f, "table[{}]", t.len()),
        }
    }
}

impl FromStr for DataSpec {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "uniform" {
            return Ok(DataSpec::Uniform);
        }
        let alpha = s
            .strip_prefix("dirichlet:")
            .and_then(|a| a.parse::<f64>().ok())
            .ok_or_else(|| OracleError::Config(format!("unknown dist '{s}'")))?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(OracleError::Concentration(alpha));
        }
        Ok(DataSpec::Dirichlet(alpha))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DataSpecWire {
    Named(String),
    Table(Vec<f64>),
}

impl Serialize for DataSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            DataSpec::Table(t) => DataSpecWire::Table(t.clone()),
            other => DataSpecWire::Named(other.to_string()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DataSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match DataSpecWire::deserialize(d)? {
            DataSpecWire::Named(s) => s.parse().map_err(serde::de::Error::custom),
            DataSpecWire::Table(t) => Ok(DataSpec::Table(t)),
        }
    }
}

fn default_blocks() -> usize {
    1
}
fn default_mc_samples() -> usize {
    16
}
fn default_n_traces() -> usize {
    100
}
fn default_theorem_samples() -> usize {
    10_000
}

/// Simulator configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub vocab_size: usize,
    pub length: usize,
    pub steps: usize,
    #[serde(default)]
    pub unmask_policy: UnmaskPolicy,
    pub dist: DataSpec,
    pub seed: u64,
    #[serde(default)]
    pub decode: DecodeMode,
    #[serde(default)]
    pub confidence_threshold: Option<f64>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_n_traces")]
    pub n_traces: usize,
    #[serde(default = "default_theorem_samples")]
    pub theorem_samples: usize,
    #[serde(default)]
    pub loss_mode: LossMode,
}

impl SimConfig {
    pub fn gen_options(&self) -> GenOptions {
        GenOptions {
            decode: self.decode,
            confidence_threshold: self.confidence_threshold,
            blocks: self.blocks,
            mc_samples: self.mc_samples,
        }
    }
}

/// Exact posterior summary for one partially masked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `marginals[i][v] = p(y_i = v | z)`; point masses at unmasked positions.
    pub marginals: Vec<Vec<f64>>,
    /// Most probable completion (lowest index among ties).
    pub argmax: Vec<TokenId>,
    /// Table mass consistent with `z`.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiffusion {
    vocab_size: usize,
    length: usize,
    table: Vec<f64>,
    steps: usize,
    unmask_policy: UnmaskPolicy,
    seed: u64,
}

fn checked_pow(v: usize, l: usize) -> Option<usize> {
    v.checked_pow(l as u32)
}

impl ToyDiffusion {
    pub fn new(
        vocab_size: usize,
        length: usize,
        table: Vec<f64>,
        steps: usize,
        unmask_policy: UnmaskPolicy,
        seed: u64,
    ) -> Result<Self, OracleError> {
        let size = Self::check_shape(vocab_size, length)?;
        if steps == 0 {
            return Err(OracleError::Steps);
        }
        if table.len() != size {
            return Err(OracleError::TableSize {
                found: table.len(),
                expected: size,
            });
        }
        let sum = exact_sum(table.iter().copied());
        let normalized = (sum - 1.0).abs() <= MASS_TOLERANCE;
        if table.iter().any(|p| !p.is_finite() || *p < 0.0) || !normalized {
            return Err(OracleError::TableMass { sum });
        }
        Ok(Self {
            vocab_size,
            length,
            table,
            steps,
            unmask_policy,
            seed,
        })
    }

    fn check_shape(vocab_size: usize, length: usize) -> Result<usize, OracleError> {
        let shape = OracleError::Shape { vocab_size, length };
        if !(2..=8).contains(&vocab_size) || !(2..=6).contains(&length) {
            return Err(shape);
        }
        checked_pow(vocab_size, length)
            .filter(|&n| n <= MAX_TABLE_SIZE)
            .ok_or(shape)
    }

    pub fn uniform(vocab_size: usize, length: usize, steps: usize, seed: u64) -> Result<Self, OracleError> {
        let size = Self::check_shape(vocab_size, length)?;
        Self::new(
            vocab_size,
            length,
            vec![1.0 / size as f64; size],
            steps,
            UnmaskPolicy::RandomOrder,
            seed,
        )
    }

    /// Table drawn from a symmetric Dirichlet via normalized Gamma draws.
    pub fn dirichlet(
        vocab_size: usize,
        length: usize,
        alpha: f64,
        steps: usize,
        seed: u64,
    ) -> Result<Self, OracleError> {
        let size = Self::check_shape(vocab_size, length)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(OracleError::Concentration(alpha));
        }
        let gamma = Gamma::new(alpha, 1.0).map_err(|_| OracleError::Concentration(alpha))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TABLE_STREAM);
        loop {
            let draws: Vec<f64> = (0..size).map(|_| gamma.sample(&mut rng)).collect();
            let total = exact_sum(draws.iter().copied());
            if total > 0.0 && total.is_finite() {
                let table = draws.iter().map(|g| g / total).collect();
                return Self::new(vocab_size, length, table, steps, UnmaskPolicy::RandomOrder, seed);
            }
        }
    }

    pub fn from_config(config: &SimConfig) -> Result<Self, OracleError> {
        let model = match &config.dist {
            DataSpec::Uniform => Self::uniform(config.vocab_size, config.length, config.steps, config.seed)?,
            DataSpec::Dirichlet(a) => {
                Self::dirichlet(config.vocab_size, config.length, *a, config.steps, config.seed)?
            }
            DataSpec::Table(t) => Self::new(
                config.vocab_size,
                config.length,
                t.clone(),
                config.steps,
                UnmaskPolicy::RandomOrder,
                config.seed,
            )?,
        };
        Ok(model.with_policy(config.unmask_policy))
    }

    pub fn with_policy(mut self, policy: UnmaskPolicy) -> Self {
        self.unmask_policy = policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Result<Self, OracleError> {
        if steps == 0 {
            return Err(OracleError::Steps);
        }
        self.steps = steps;
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn unmask_policy(&self) -> UnmaskPolicy {
        self.unmask_policy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// The mask token follows the content tokens.
    pub fn mask_id(&self) -> TokenId {
        self.vocab_size as TokenId
    }

    /// Table index of a sequence; position 0 is the most significant digit.
    pub fn encode(&self, y: &[TokenId]) -> usize {
        y.iter().fold(0, |acc, &t| acc * self.vocab_size + t as usize)
    }

    pub fn decode(&self, mut index: usize) -> Vec<TokenId> {
        let mut y = vec![0; self.length];
        for slot in y.iter_mut().rev() {
            *slot = (index % self.vocab_size) as TokenId;
            index /= self.vocab_size;
        }
        y
    }

    pub fn probability(&self, y: &[TokenId]) -> f64 {
        self.table[self.encode(y)]
    }

    /// Most probable sequence (lowest index among ties).
    pub fn mode(&self) -> Vec<TokenId> {
        let mut best = 0;
        for (i, &p) in self.table.iter().enumerate() {
            if p > self.table[best] {
                best = i;
            }
        }
        self.decode(best)
    }

    pub fn vocab(&self) -> Vocab {
        let mut entries: Vec<String> = (0..self.vocab_size).map(|v| format!("t{v} ")).collect();
        entries.push("[MASK]".into());
        Vocab {
            entries,
            mask_id: self.mask_id(),
            special_ids: [self.mask_id()].into(),
        }
    }

    pub fn header(&self, blocks: usize) -> Arc<TraceHeader> {
        Arc::new(TraceHeader {
            format_version: FORMAT_VERSION,
            model_name: "toy-diffusion".into(),
            task: "simulation".into(),
            max_steps_per_block: self.steps as u32,
            block_length: (self.length / blocks.max(1)) as u32,
            num_blocks: blocks as u32,
            vocab: self.vocab(),
        })
    }

    /// Calls `f(index, y)` for every sequence matching the unmasked
    /// entries of `z`, in increasing index order.
    fn for_each_completion(&self, z: &[Option<TokenId>], mut f: impl FnMut(usize, &[TokenId])) {
        let masked: Vec<usize> = (0..self.length).filter(|&i| z[i].is_none()).collect();
        let mut y: Vec<TokenId> = z.iter().map(|t| t.unwrap_or(0)).collect();
        loop {
            f(self.encode(&y), &y);
            // odometer over masked positions, last position fastest
            let mut carry = true;
            for &i in masked.iter().rev() {
                y[i] += 1;
                if (y[i] as usize) < self.vocab_size {
                    carry = false;
                    break;
                }
                y[i] = 0;
            }
            if carry {
                return;
            }
        }
    }

    /// Exact posterior `p_data(y | z)` summarized per position, plus the
    /// joint argmax completion.
    pub fn exact_posterior(&self, z: &[Option<TokenId>]) -> Result<Posterior, OracleError> {
        assert_eq!(z.len(), self.length, "z must have the model's length");
        let mut marg = vec![vec![0.0; self.vocab_size]; self.length];
        let mut best: Option<(usize, f64)> = None;
        self.for_each_completion(z, |index, y| {
            let p = self.table[index];
            if p > 0.0 {
                for (i, &t) in y.iter().enumerate() {
                    marg[i][t as usize] += p;
                }
                if best.is_none_or(|(_, b)| p > b) {
                    best = Some((index, p));
                }
            }
        });
        let (best, _) = best.ok_or(OracleError::Inconsistent)?;
        let mut mass = 0.0;
        for row in &mut marg {
            // normalizing by the row's own sum keeps every entry <= 1
            let total: f64 = row.iter().sum();
            mass = total;
            row.iter_mut().for_each(|p| *p /= total);
        }
        Ok(Posterior {
            marginals: marg,
            argmax: self.decode(best),
            mass,
        })
    }

    /// Draws a completion of `z` from the exact joint posterior.
    pub fn sample_completion<R: Rng>(&self, z: &[Option<TokenId>], rng: &mut R) -> Result<Vec<TokenId>, OracleError> {
        let mut total = 0.0;
        self.for_each_completion(z, |index, _| total += self.table[index]);
        if total.is_nan() || total <= 0.0 {
            return Err(OracleError::Inconsistent);
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        let mut last_positive = 0;
        self.for_each_completion(z, |index, _| {
            let p = self.table[index];
            if p > 0.0 {
                last_positive = index;
                acc += p;
                if chosen.is_none() && target < acc {
                    chosen = Some(index);
                }
            }
        });
        Ok(self.decode(chosen.unwrap_or(last_positive)))
    }

    /// Draws a sequence from the data distribution.
    pub fn sample_sequence<R: Rng>(&self, rng: &mut R) -> Vec<TokenId> {
        let z = vec![None; self.length];
        self.sample_completion(&z, rng).expect("table has positive mass")
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum::<f64>().max(0.0)
}
