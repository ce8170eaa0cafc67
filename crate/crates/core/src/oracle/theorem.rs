use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{OracleError, Posterior, ToyDiffusion, MAX_EXACT_PAIRS};
use crate::dissimilarity::{self, exact_bounds, to_f64, ADConfig, DissimilarityError};
use crate::numeric::{exact_sum, mean_and_standard_error};
use crate::trace::{InstanceTrace, TokenId};

/// Monte Carlo samples per RNG stream.
const BATCH: usize = 1024;
/// Offset keeping verification streams apart from trace-generation streams.
const THEOREM_STREAM_BASE: u64 = 1 << 62;
/// One-sided slack, in standard errors, for sampled inequality checks.
pub const SE_SLACK: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0 }
    }

    fn from_samples(values: &[f64]) -> Self {
        let (value, std_error) = mean_and_standard_error(values);
        Self { value, std_error }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    ExactDiscretized,
    MonteCarlo,
}

/// Per-step terms of the discretized bound for t = 1..T.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTerms {
    /// `P(ỹ_t ≢ y)` with ỹ_t the joint argmax given z_t.
    pub error: Vec<f64>,
    /// `(t/T)·L_t`: expected masked cross-entropy at masking rate t/T.
    pub scaled_loss: Vec<f64>,
}

impl StepTerms {
    /// `L^discr = (1/T) Σ_t (T/t)·scaled_loss_t`.
    pub fn loss(&self) -> f64 {
        let t = self.error.len();
        exact_sum(self.scaled_loss.iter().enumerate().map(|(i, c)| c * t as f64 / (i + 1) as f64)) / t as f64
    }

    pub fn mean_error(&self) -> f64 {
        exact_sum(self.error.iter().copied()) / self.error.len() as f64
    }
}

/// Exact per-step terms by enumerating every sequence and every mask
/// pattern at each masking rate t/T.
pub fn exact_step_terms(model: &ToyDiffusion) -> Result<StepTerms, OracleError> {
    let l = model.length();
    let v = model.vocab_size();
    let pairs = (model.table().len() as u128) << l;
    if pairs > MAX_EXACT_PAIRS as u128 {
        return Err(OracleError::EnumerationBound {
            pairs,
            limit: MAX_EXACT_PAIRS,
        });
    }
    // per mask pattern: error mass and cross-entropy mass, independent of t
    let patterns: Vec<(usize, f64, f64)> = (0..1usize << l)
        .map(|bits| {
            let masked: Vec<usize> = (0..l).filter(|i| bits >> i & 1 == 1).collect();
            let groups = v.pow((l - masked.len()) as u32);
            let mut total = vec![0.0; groups];
            let mut best = vec![0.0f64; groups];
            let mut marg = vec![0.0; groups * masked.len() * v];
            for (index, &p) in model.table().iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let y = model.decode(index);
                let key = (0..l)
                    .filter(|i| bits >> i & 1 == 0)
                    .fold(0, |acc, i| acc * v + y[i] as usize);
                total[key] += p;
                best[key] = best[key].max(p);
                for (j, &i) in masked.iter().enumerate() {
                    marg[(key * masked.len() + j) * v + y[i] as usize] += p;
                }
            }
            let error = exact_sum((0..groups).map(|g| total[g] - best[g]));
            let width = masked.len() * v;
            let ce = exact_sum((0..groups).flat_map(|g| {
                let (total, marg) = (total[g], &marg);
                marg[g * width..(g + 1) * width]
                    .iter()
                    .filter(|&&m| m > 0.0)
                    .map(move |&m| -m * (m / total).ln())
            }));
            (masked.len(), error, ce)
        })
        .collect();
    let t_max = model.steps();
    let mut error = Vec::with_capacity(t_max);
    let mut scaled_loss = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let r = t as f64 / t_max as f64;
        let weight = |k: usize| r.powi(k as i32) * (1.0 - r).powi((l - k) as i32);
        error.push(exact_sum(patterns.iter().map(|&(k, e, _)| weight(k) * e)));
        scaled_loss.push(exact_sum(patterns.iter().map(|&(k, _, c)| weight(k) * c)));
    }
    Ok(StepTerms { error, scaled_loss })
}

/// Sampled per-step indicators and cross-entropies, one row per draw.
struct Draws {
    error: Vec<Vec<f64>>,
    ce: Vec<Vec<f64>>,
}

fn z_key(z: &[Option<TokenId>], base: usize) -> usize {
    z.iter().fold(0, |acc, t| acc * base + t.map_or(base - 1, |t| t as usize))
}

/// Draws `(y, z_t)` for t = 1..T with coupled masking: position i is masked
/// at rate t/T when its uniform `u_i < t/T`. Marginally each z_t follows
/// independent Bernoulli(t/T) masking.
fn draw(model: &ToyDiffusion, samples: usize) -> Draws {
    let t_max = model.steps();
    let l = model.length();
    let batches = samples.div_ceil(BATCH);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..batches)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed());
            rng.set_stream(THEOREM_STREAM_BASE + b as u64);
            let mut cache: HashMap<usize, Posterior> = HashMap::new();
            let n = BATCH.min(samples - b * BATCH);
            (0..n)
                .map(|_| {
                    let y = model.sample_sequence(&mut rng);
                    let u: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
                    let mut err = Vec::with_capacity(t_max);
                    let mut ce = Vec::with_capacity(t_max);
                    for t in 1..=t_max {
                        let r = t as f64 / t_max as f64;
                        let z: Vec<Option<TokenId>> = (0..l).map(|i| (u[i] >= r).then_some(y[i])).collect();
                        let post = cache
                            .entry(z_key(&z, model.vocab_size() + 1))
                            .or_insert_with(|| model.exact_posterior(&z).expect("z drawn from the table"));
                        err.push(if post.argmax == y { 0.0 } else { 1.0 });
                        ce.push(
                            (0..l)
                                .filter(|&i| z[i].is_none())
                                .map(|i| -post.marginals[i][y[i] as usize].ln())
                                .sum(),
                        );
                    }
                    (err, ce)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let (error, ce) = rows.into_iter().unzip();
    Draws { error, ce }
}

fn per_draw_loss(ce: &[f64]) -> f64 {
    let t = ce.len();
    ce.iter().enumerate().map(|(i, c)| c * t as f64 / (i + 1) as f64).sum::<f64>() / t as f64
}

/// The discretized masking loss `L^discr`, exactly or by Monte Carlo.
pub fn masking_loss(model: &ToyDiffusion, mode: LossMode, samples: usize) -> Result<Estimate, OracleError> {
    match mode {
        LossMode::ExactDiscretized => Ok(Estimate::exact(exact_step_terms(model)?.loss())),
        LossMode::MonteCarlo => {
            if samples == 0 {
                return Err(OracleError::Config("monte_carlo mode needs at least one sample".into()));
            }
            let d = draw(model, samples);
            let values: Vec<f64> = d.ce.iter().map(|c| per_draw_loss(c)).collect();
            Ok(Estimate::from_samples(&values))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub vocab_size: usize,
    pub length: usize,
    pub steps: usize,
    pub seed: u64,
    /// Number of Monte Carlo draws; 0 for exact enumeration.
    pub samples: usize,
    pub mean_u_ad: Estimate,
    pub loss_value: Estimate,
    /// `P(ỹ_t ≢ y)` for t = 1..T.
    pub per_step_probs: Vec<Estimate>,
    /// `(t/T)·L_t^discr` for t = 1..T.
    pub per_step_bounds: Vec<Estimate>,
    pub per_step_holds: Vec<bool>,
    pub inequality_holds: bool,
    /// `loss_value − mean_u_ad`.
    pub margin: f64,
}

/// Paired check `mean(a − b) <= slack · se(a − b)`.
fn holds_paired(a: &[f64], b: &[f64]) -> bool {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, se) = mean_and_standard_error(&diff);
    mean <= SE_SLACK * se
}

/// Monte Carlo check of `E[u_AD] <= L^discr` and of the per-step chain
/// `P(ỹ_t ≢ y) <= (t/T)·L_t`, each with one-sided 3-SE slack on the paired
/// difference. Uses the indicator dissimilarity and joint argmax decoding.
pub fn verify_theorem1(model: &ToyDiffusion, samples: usize) -> Result<TheoremReport, OracleError> {
    if samples < 2 {
        return Err(OracleError::Config("theorem verification needs at least 2 samples".into()));
    }
    let d = draw(model, samples);
    let t_max = model.steps();
    let u_ad: Vec<f64> = d.error.iter().map(|e| e.iter().sum::<f64>() / t_max as f64).collect();
    let loss: Vec<f64> = d.ce.iter().map(|c| per_draw_loss(c)).collect();
    let column = |rows: &[Vec<f64>], t: usize| rows.iter().map(|r| r[t]).collect::<Vec<f64>>();
    let mut per_step_probs = Vec::with_capacity(t_max);
    let mut per_step_bounds = Vec::with_capacity(t_max);
    let mut per_step_holds = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let (e, c) = (column(&d.error, t), column(&d.ce, t));
        per_step_probs.push(Estimate::from_samples(&e));
        per_step_bounds.push(Estimate::from_samples(&c));
        per_step_holds.push(holds_paired(&e, &c));
    }
    let mean_u_ad = Estimate::from_samples(&u_ad);
    let loss_value = Estimate::from_samples(&loss);
    let inequality_holds = holds_paired(&u_ad, &loss) && per_step_holds.iter().all(|&h| h);
    Ok(TheoremReport {
        vocab_size: model.vocab_size(),
        length: model.length(),
        steps: t_max,
        seed: model.seed(),
        samples,
        margin: loss_value.value - mean_u_ad.value,
        mean_u_ad,
        loss_value,
        per_step_probs,
        per_step_bounds,
        per_step_holds,
        inequality_holds,
    })
}

/// Both sides of the bound by full enumeration; no sampling error.
pub fn verify_theorem1_exact(model: &ToyDiffusion) -> Result<TheoremReport, OracleError> {
    let terms = exact_step_terms(model)?;
    let mean_u_ad = Estimate::exact(terms.mean_error());
    let loss_value = Estimate::exact(terms.loss());
    let per_step_holds: Vec<bool> = terms
        .error
        .iter()
        .zip(&terms.scaled_loss)
        .map(|(e, c)| e <= c)
        .collect();
    Ok(TheoremReport {
        vocab_size: model.vocab_size(),
        length: model.length(),
        steps: model.steps(),
        seed: model.seed(),
        samples: 0,
        margin: loss_value.value - mean_u_ad.value,
        inequality_holds: mean_u_ad.value <= loss_value.value && per_step_holds.iter().all(|&h| h),
        per_step_probs: terms.error.iter().map(|&e| Estimate::exact(e)).collect(),
        per_step_bounds: terms.scaled_loss.iter().map(|&c| Estimate::exact(c)).collect(),
        per_step_holds,
        mean_u_ad,
        loss_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub instance_id: String,
    /// False when the view has no valid trajectory; the bounds are then vacuous.
    pub defined: bool,
    pub lower: f64,
    pub progressive: f64,
    pub ad: f64,
    /// Checked in exact rational arithmetic.
    pub holds: bool,
}

/// Checks `AD/T <= progressive <= AD` per trace with no tolerance.
pub fn verify_prop1(traces: &[InstanceTrace], config: &ADConfig) -> Result<Vec<Prop1Report>, DissimilarityError> {
    traces
        .par_iter()
        .map(|trace| {
            let d = dissimilarity::step_dissimilarities(trace, config.view, config.render_masks, &config.provider)?;
            Ok(match exact_bounds(&d) {
                Some(b) => Prop1Report {
                    instance_id: trace.instance_id.clone(),
                    defined: true,
                    lower: to_f64(&b.lower),
                    progressive: to_f64(&b.progressive),
                    ad: to_f64(&b.ad),
                    holds: b.holds(),
                },
                None => Prop1Report {
                    instance_id: trace.instance_id.clone(),
                    defined: false,
                    lower: f64::NAN,
                    progressive: f64::NAN,
                    ad: f64::NAN,
                    holds: true,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::UnmaskPolicy;
    use super::*;

    fn point_mass() -> ToyDiffusion {
        let mut table = vec![0.0; 9];
        table[4] = 1.0;
        ToyDiffusion::new(3, 2, table, 3, UnmaskPolicy::RandomOrder, 0).unwrap()
    }

    #[test]
    fn point_mass_has_zero_loss_and_zero_error() {
        let m = point_mass();
        let exact = verify_theorem1_exact(&m).unwrap();
        assert_eq!(exact.loss_value.value, 0.0);
        assert_eq!(exact.mean_u_ad.value, 0.0);
        assert!(exact.inequality_holds);
        let mc = verify_theorem1(&m, 1000).unwrap();
        assert_eq!(mc.mean_u_ad.value, 0.0);
        assert_eq!(mc.loss_value.value, 0.0);
        assert!(mc.inequality_holds);
    }

    #[test]
    fn uniform_two_by_two_by_hand() {
        let m = ToyDiffusion::uniform(2, 2, 2, 0).unwrap();
        let terms = exact_step_terms(&m).unwrap();
        assert!((terms.error[0] - 0.4375).abs() < 1e-15);
        assert!((terms.error[1] - 0.75).abs() < 1e-15);
        assert!((terms.mean_error() - 0.59375).abs() < 1e-15);
        let ln2 = 2f64.ln();
        assert!((terms.scaled_loss[0] - ln2).abs() < 1e-15);
        assert!((terms.scaled_loss[1] - 2.0 * ln2).abs() < 1e-15);
        assert!((terms.loss() - 2.0 * ln2).abs() < 1e-15);
    }

    #[test]
    fn uniform_loss_is_length_times_log_v() {
        // every L_t equals L ln V for independent uniform positions
        let m = ToyDiffusion::uniform(3, 3, 4, 0).unwrap();
        let loss = masking_loss(&m, LossMode::ExactDiscretized, 0).unwrap();
        assert!((loss.value - 3.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_loss_agrees_with_enumeration() {
        let m = ToyDiffusion::dirichlet(3, 3, 1.0, 4, 8).unwrap();
        let exact = masking_loss(&m, LossMode::ExactDiscretized, 0).unwrap().value;
        let mc = masking_loss(&m, LossMode::MonteCarlo, 20_000).unwrap();
        assert!((mc.value - exact).abs() <= 3.0 * mc.std_error, "{mc:?} vs {exact}");
    }

    #[test]
    fn enumeration_bound_is_reported() {
        let m = ToyDiffusion::uniform(8, 6, 2, 0).unwrap();
        let err = masking_loss(&m, LossMode::ExactDiscretized, 0).unwrap_err();
        assert!(err.to_string().contains("monte_carlo"));
    }

    #[test]
    fn sampled_report_is_reproducible() {
        let m = ToyDiffusion::dirichlet(2, 3, 1.0, 2, 4).unwrap();
        assert_eq!(verify_theorem1(&m, 3000).unwrap(), verify_theorem1(&m, 3000).unwrap());
    }
}
