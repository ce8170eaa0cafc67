//! Trajectory semantic instability: average dissimilarity between decoded
//! intermediate states and the final output, plain or progress-weighted.
//!
//! Aggregation is carried out in exact rational arithmetic and rounded once,
//! so the bounds `AD / T <= progressive <= AD` survive conversion to `f64`.

use std::collections::HashMap;
use std::sync::Arc;

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

use crate::signals::SignalValue;
use crate::similarity::{MaskRendering, SimilarityError, SimilarityProvider, Utterance};
use crate::trace::{InstanceTrace, TraceError, TrajectoryIndex, TrajectoryView, ViewKind};

#[derive(Debug, Error)]
pub enum DissimilarityError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("no precomputed similarity for view {view}, block {block}, step {step}")]
    MissingPrecomputed { view: ViewKind, block: usize, step: usize },
}

#[derive(Debug, Clone)]
pub struct ADConfig {
    pub view: ViewKind,
    /// Progressive weighting: earliest step weight 1, final step 1/T.
    pub weighted: bool,
    pub render_masks: MaskRendering,
    pub provider: Arc<SimilarityProvider>,
}

impl ADConfig {
    pub fn new(view: ViewKind, provider: Arc<SimilarityProvider>) -> Self {
        Self {
            view,
            weighted: false,
            render_masks: MaskRendering::default(),
            provider,
        }
    }

    pub fn weighted(mut self, weighted: bool) -> Self {
        self.weighted = weighted;
        self
    }

    /// `ad_<view>`, with a `_prog` suffix when weighted.
    pub fn signal_name(&self) -> String {
        signal_name(self.view, self.weighted)
    }
}

pub fn signal_name(view: ViewKind, weighted: bool) -> String {
    if weighted {
        format!("ad_{view}_prog")
    } else {
        format!("ad_{view}")
    }
}

/// Trajectories scored under `view`: one per valid block for the block view,
/// otherwise a single one. Empty when the trace has no valid block.
pub fn trajectories(trace: &InstanceTrace, view: ViewKind) -> Vec<TrajectoryView> {
    if trace.num_valid_blocks() == 0 {
        return Vec::new();
    }
    match view {
        ViewKind::Block => trace.valid_blocks().into_iter().map(TrajectoryView::Block).collect(),
        ViewKind::Last => vec![TrajectoryView::Last],
        ViewKind::LastPrefix => vec![TrajectoryView::LastPrefix],
        ViewKind::Full => vec![TrajectoryView::Full],
    }
}

/// Key of a precomputed entry for step `s` (1-based) of a trajectory.
/// Full-view steps are addressed by the block they fall in and the step
/// within that block.
fn precomputed_key(
    index: &TrajectoryIndex<'_>,
    view: TrajectoryView,
    s: usize,
) -> Result<(ViewKind, usize, usize), DissimilarityError> {
    let trace = index.trace();
    let last = || trace.last_valid_block().ok_or_else(|| TraceError::NoValidBlock(view.to_string()));
    Ok(match view {
        TrajectoryView::Block(b) => (ViewKind::Block, b, s),
        TrajectoryView::Last => (ViewKind::Last, last()?, s),
        TrajectoryView::LastPrefix => (ViewKind::LastPrefix, last()?, s),
        TrajectoryView::Full => {
            let (b, t) = index.full_step_location(s).ok_or(TraceError::StepOutOfRange {
                view: view.to_string(),
                step: s,
                max: index.num_steps(view)?,
            })?;
            (ViewKind::Full, b, t)
        }
    })
}

/// Dissimilarities `D(ỹ_s, y) = 1 - sim` for s = 1..T along each of the
/// view's trajectories, in generation order.
pub fn step_dissimilarities(
    trace: &InstanceTrace,
    view: ViewKind,
    render_masks: MaskRendering,
    provider: &SimilarityProvider,
) -> Result<Vec<Vec<f64>>, DissimilarityError> {
    let index = trace.index();
    let views = trajectories(trace, view);

    if let SimilarityProvider::Precomputed = provider {
        let table: HashMap<(ViewKind, usize, usize), f64> = trace
            .precomputed_similarity
            .iter()
            .flatten()
            .map(|p| ((p.view, p.block as usize, p.step as usize), p.sim))
            .collect();
        return views
            .into_iter()
            .map(|v| {
                (1..=index.num_steps(v)?)
                    .map(|s| {
                        let key = precomputed_key(&index, v, s)?;
                        table
                            .get(&key)
                            .map(|sim| 1.0 - sim.clamp(0.0, 1.0))
                            .ok_or(DissimilarityError::MissingPrecomputed {
                                view: key.0,
                                block: key.1,
                                step: key.2,
                            })
                    })
                    .collect()
            })
            .collect();
    }

    let vocab = trace.vocab();
    let mut pairs = Vec::new();
    let mut lengths = Vec::with_capacity(views.len());
    for v in views {
        let reference = Utterance::render(vocab, &index.reference(v)?, render_masks);
        let steps = index.num_steps(v)?;
        for s in 1..=steps {
            let state = Utterance::render(vocab, &index.sequence(v, s)?, render_masks);
            pairs.push((state, reference.clone()));
        }
        lengths.push(steps);
    }
    let sims = provider.similarity_batch(&pairs)?;
    let mut rest = sims.as_slice();
    Ok(lengths
        .into_iter()
        .map(|n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.iter().map(|s| 1.0 - s.clamp(0.0, 1.0)).collect()
        })
        .collect())
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("dissimilarities are finite")
}

fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(n.into(), d.into())
}

/// Exact AD, progressive AD and the AD/T lower bound of a single
/// trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactBounds {
    pub lower: BigRational,
    pub progressive: BigRational,
    pub ad: BigRational,
}

impl ExactBounds {
    pub fn holds(&self) -> bool {
        self.lower <= self.progressive && self.progressive <= self.ad
    }
}

fn trajectory_bounds(d: &[f64]) -> ExactBounds {
    let t = d.len();
    let mut ad = BigRational::zero();
    let mut progressive = BigRational::zero();
    for (i, &x) in d.iter().enumerate() {
        let x = rational(x);
        progressive += &x * ratio(t - i, t);
        ad += x;
    }
    let inv = ratio(1, t);
    ad *= &inv;
    progressive *= &inv;
    ExactBounds {
        lower: &ad * &inv,
        progressive,
        ad,
    }
}

/// Bounds aggregated over trajectories by their mean. With several
/// trajectories the lower bound uses the longest one's step count, which
/// keeps it below the mean of per-trajectory lower bounds.
///
/// Returns `None` when there is no trajectory or one of them is empty.
pub fn exact_bounds(trajectories: &[Vec<f64>]) -> Option<ExactBounds> {
    if trajectories.is_empty() || trajectories.iter().any(Vec::is_empty) {
        return None;
    }
    let n = trajectories.len();
    let t_max = trajectories.iter().map(Vec::len).max()?;
    let mut ad = BigRational::zero();
    let mut progressive = BigRational::zero();
    for d in trajectories {
        let b = trajectory_bounds(d);
        ad += b.ad;
        progressive += b.progressive;
    }
    ad *= ratio(1, n);
    progressive *= ratio(1, n);
    Some(ExactBounds {
        lower: &ad * ratio(1, t_max),
        progressive,
        ad,
    })
}

pub(crate) fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn score(trace: &InstanceTrace, config: &ADConfig, weighted: bool) -> Result<SignalValue, DissimilarityError> {
    let name = signal_name(config.view, weighted);
    let d = step_dissimilarities(trace, config.view, config.render_masks, &config.provider)?;
    Ok(match exact_bounds(&d) {
        Some(b) => SignalValue::defined(name, to_f64(if weighted { &b.progressive } else { &b.ad })),
        None => SignalValue::undefined(name),
    })
}

/// Average dissimilarity under `config.view`; progressive when
/// `config.weighted` is set.
pub fn average_dissimilarity(trace: &InstanceTrace, config: &ADConfig) -> Result<SignalValue, DissimilarityError> {
    score(trace, config, config.weighted)
}

/// Progress-weighted dissimilarity regardless of `config.weighted`.
pub fn progressive_dissimilarity(
    trace: &InstanceTrace,
    config: &ADConfig,
) -> Result<SignalValue, DissimilarityError> {
    score(trace, config, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::fixtures::{build, header};
    use crate::trace::PrecomputedSimilarity;

    fn provider(p: SimilarityProvider) -> Arc<SimilarityProvider> {
        Arc::new(p)
    }

    fn two_block() -> InstanceTrace {
        build(
            header(2, 2, 3),
            &[
                vec![vec![1, 2], vec![1, 3]],
                vec![vec![4, 4], vec![5, 4], vec![5, 6]],
            ],
            &[vec![1, 2], vec![2, 3]],
        )
    }

    #[test]
    fn identical_states_score_zero() {
        // everything commits at step 1
        let t = build(header(3, 1, 2), &[vec![vec![1, 2, 3], vec![1, 2, 3]]], &[vec![1, 1, 1]]);
        for view in ViewKind::ALL {
            for weighted in [false, true] {
                let cfg = ADConfig::new(view, provider(SimilarityProvider::TokenLcs)).weighted(weighted);
                let v = average_dissimilarity(&t, &cfg).unwrap();
                assert_eq!(v.value, 0.0, "{view} {weighted}");
            }
        }
    }

    #[test]
    fn exact_match_indicator_mean() {
        // T = 4; only step 1 differs from the output
        let t = build(
            header(2, 1, 4),
            &[vec![vec![1, 7], vec![1, 2], vec![1, 2], vec![1, 2]]],
            &[vec![1, 2]],
        );
        let cfg = ADConfig::new(ViewKind::Full, provider(SimilarityProvider::ExactMatch));
        assert_eq!(average_dissimilarity(&t, &cfg).unwrap().value, 0.25);
        // progressive: weight 1 on step 1 → (1·1)/4
        assert_eq!(progressive_dissimilarity(&t, &cfg).unwrap().value, 0.25);
    }

    #[test]
    fn two_step_progressive_example() {
        let b = exact_bounds(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(to_f64(&b.ad), 1.0);
        assert_eq!(to_f64(&b.progressive), 0.75);
        assert_eq!(to_f64(&b.lower), 0.5);
        assert!(b.holds());
    }

    #[test]
    fn block_view_averages_valid_blocks() {
        let t = two_block();
        let cfg = ADConfig::new(ViewKind::Block, provider(SimilarityProvider::ExactMatch));
        // block 0: states [1,2] then [1,3] = final → D = (1, 0) → 0.5
        // block 1: [4,4], [5,4], [5,6] vs [5,6] → D = (1, 1, 0) → 2/3
        let v = average_dissimilarity(&t, &cfg).unwrap().value;
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let names: Vec<_> = trajectories(&t, ViewKind::Block);
        assert_eq!(names, vec![TrajectoryView::Block(0), TrajectoryView::Block(1)]);
    }

    #[test]
    fn full_view_counts_every_step() {
        let t = two_block();
        let d = step_dissimilarities(&t, ViewKind::Full, MaskRendering::Sentinel, &SimilarityProvider::ExactMatch)
            .unwrap();
        assert_eq!(d, vec![vec![1.0, 1.0, 1.0, 1.0, 0.0]]);
    }

    #[test]
    fn no_valid_block_is_undefined() {
        // eos (8) only
        let t = build(header(2, 1, 1), &[vec![vec![8, 8]]], &[vec![1, 1]]);
        let cfg = ADConfig::new(ViewKind::Full, provider(SimilarityProvider::ExactMatch));
        assert!(!average_dissimilarity(&t, &cfg).unwrap().well_defined);
    }

    #[test]
    fn single_block_views_agree() {
        let t = build(
            header(3, 1, 3),
            &[vec![vec![1, 5, 7], vec![1, 2, 7], vec![1, 2, 3]]],
            &[vec![1, 2, 3]],
        );
        let values: Vec<f64> = ViewKind::ALL
            .iter()
            .map(|&v| {
                average_dissimilarity(&t, &ADConfig::new(v, provider(SimilarityProvider::TokenLevenshtein)))
                    .unwrap()
                    .value
            })
            .collect();
        assert!(values.windows(2).all(|w| w[0] == w[1]), "{values:?}");
    }

    #[test]
    fn precomputed_lookup_and_missing_entry() {
        let mut t = two_block();
        t.precomputed_similarity = Some(vec![
            PrecomputedSimilarity { view: ViewKind::Last, block: 1, step: 1, sim: 0.5 },
            PrecomputedSimilarity { view: ViewKind::Last, block: 1, step: 2, sim: 1.5 },
            PrecomputedSimilarity { view: ViewKind::Last, block: 1, step: 3, sim: 1.0 },
        ]);
        let p = provider(SimilarityProvider::Precomputed);
        let v = average_dissimilarity(&t, &ADConfig::new(ViewKind::Last, p.clone())).unwrap();
        assert!((v.value - 0.5 / 3.0).abs() < 1e-15);
        let err = average_dissimilarity(&t, &ADConfig::new(ViewKind::Full, p)).unwrap_err();
        assert!(matches!(
            err,
            DissimilarityError::MissingPrecomputed { view: ViewKind::Full, block: 0, step: 1 }
        ));
    }
}
