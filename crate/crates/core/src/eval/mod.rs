//! Selective-generation evaluation: rejection curves, prediction rejection
//! ratio and ROC-AUC over joined (quality, uncertainty) records.

mod join;

use std::cmp::Ordering;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::ExactSum;

pub use join::{join, read_qualities, JoinStats, MetricOutput, QualityRecord, TaskPreset};

/// Default rejection cap: curves stop at half of the data.
pub const DEFAULT_MAX_REJECT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("max_reject must lie in (0, 1], got {0}")]
    MaxReject(f64),
    #[error("record {0} has a non-finite quality or uncertainty")]
    NonFinite(String),
    #[error("ROC-AUC needs both classes, got {positives} positive and {negatives} negative records")]
    SingleClass { positives: usize, negatives: usize },
    #[error("duplicate instance_id '{instance_id}' in {side}")]
    DuplicateId { side: &'static str, instance_id: String },
    #[error("line {line} of quality file: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub quality: f64,
    pub uncertainty: f64,
}

impl EvalRecord {
    pub fn new(instance_id: impl Into<String>, quality: f64, uncertainty: f64) -> Self {
        Self {
            instance_id: instance_id.into(),
            quality,
            uncertainty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionOrder {
    /// Highest uncertainty first; ties by ascending instance_id.
    ByUncertainty,
    /// Lowest quality first; ties by ascending instance_id.
    Oracle,
    /// Seeded uniform shuffle.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub reject_fraction: f64,
    pub mean_quality: f64,
}

fn check(records: &[EvalRecord], max_reject: f64) -> Result<usize, EvalError> {
    if records.len() < 2 {
        return Err(EvalError::TooFewRecords(records.len()));
    }
    if !(max_reject > 0.0 && max_reject <= 1.0) {
        return Err(EvalError::MaxReject(max_reject));
    }
    if let Some(r) = records
        .iter()
        .find(|r| !r.quality.is_finite() || !r.uncertainty.is_finite())
    {
        return Err(EvalError::NonFinite(r.instance_id.clone()));
    }
    let n = records.len();
    // the full data set is never rejected
    Ok(((max_reject * n as f64).floor() as usize).min(n - 1))
}

/// Record indices in the order they are rejected.
pub fn rejection_order(records: &[EvalRecord], order: RejectionOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let by_id = |a: usize, b: usize| records[a].instance_id.cmp(&records[b].instance_id);
    match order {
        RejectionOrder::ByUncertainty => idx.sort_by(|&a, &b| {
            records[b]
                .uncertainty
                .total_cmp(&records[a].uncertainty)
                .then_with(|| by_id(a, b))
        }),
        RejectionOrder::Oracle => idx.sort_by(|&a, &b| {
            records[a]
                .quality
                .total_cmp(&records[b].quality)
                .then_with(|| by_id(a, b))
        }),
        RejectionOrder::Random(seed) => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    idx
}

/// Mean quality of the retained records after rejecting k of n, for
/// k = 0..=⌊max_reject·n⌋ (capped at n − 1). Means are correctly rounded.
pub fn rejection_curve(
    records: &[EvalRecord],
    order: RejectionOrder,
    max_reject: f64,
) -> Result<Vec<CurvePoint>, EvalError> {
    let k_max = check(records, max_reject)?;
    let n = records.len();
    let order = rejection_order(records, order);
    let mut retained: ExactSum = records.iter().map(|r| r.quality).collect();
    let mut curve = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        if k > 0 {
            retained.add(-records[order[k - 1]].quality);
        }
        curve.push(CurvePoint {
            reject_fraction: k as f64 / n as f64,
            mean_quality: retained.mean(n - k),
        });
    }
    Ok(curve)
}

/// Trapezoidal area of a curve on the uniform k/n grid, correctly rounded.
fn area(values: &[f64], n: usize) -> f64 {
    let mut acc = ExactSum::new();
    for w in values.windows(2) {
        acc.add(w[0]);
        acc.add(w[1]);
    }
    acc.mean(2 * n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRRResult {
    pub prr: f64,
    pub auc_unc: f64,
    pub auc_oracle: f64,
    pub auc_random: f64,
    pub degenerate: bool,
}

/// Relative size under which the oracle-random gap counts as zero.
const DEGENERATE_TOLERANCE: f64 = 1e-12;

/// Prediction rejection ratio with the random baseline taken as the flat
/// curve at the overall mean quality.
pub fn prr(records: &[EvalRecord], max_reject: f64) -> Result<PRRResult, EvalError> {
    let n = records.len();
    let unc = rejection_curve(records, RejectionOrder::ByUncertainty, max_reject)?;
    let oracle = rejection_curve(records, RejectionOrder::Oracle, max_reject)?;
    let values = |c: &[CurvePoint]| c.iter().map(|p| p.mean_quality).collect::<Vec<_>>();
    let auc_unc = area(&values(&unc), n);
    let auc_oracle = area(&values(&oracle), n);
    let auc_random = area(&vec![oracle[0].mean_quality; oracle.len()], n);
    let denom = auc_oracle - auc_random;
    let scale = auc_oracle.abs().max(auc_random.abs());
    let degenerate = denom.is_nan() || denom <= DEGENERATE_TOLERANCE * scale;
    Ok(PRRResult {
        prr: if degenerate { 0.0 } else { (auc_unc - auc_random) / denom },
        auc_unc,
        auc_oracle,
        auc_random,
        degenerate,
    })
}

/// ROC-AUC of uncertainty as a detector of low quality: records with
/// `quality >= threshold` are positive, uncertainty scores the negatives.
/// Ties count one half (midrank rank-sum).
pub fn roc_auc(records: &[EvalRecord], threshold: f64) -> Result<f64, EvalError> {
    if let Some(r) = records
        .iter()
        .find(|r| !r.quality.is_finite() || !r.uncertainty.is_finite())
    {
        return Err(EvalError::NonFinite(r.instance_id.clone()));
    }
    let negatives = records.iter().filter(|r| r.quality < threshold).count();
    let positives = records.len() - negatives;
    if negatives == 0 || positives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[a].uncertainty.total_cmp(&records[b].uncertainty));
    // twice the midrank, kept integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len()
            && records[idx[j + 1]].uncertainty.total_cmp(&records[idx[i]].uncertainty) == Ordering::Equal
        {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        let neg_in_group = idx[i..=j].iter().filter(|&&k| records[k].quality < threshold).count() as u128;
        rank_sum2 += twice_midrank * neg_in_group;
        i = j + 1;
    }
    let n_neg = negatives as u128;
    let u2 = rank_sum2 - n_neg * (n_neg + 1);
    Ok(u2 as f64 / (2 * negatives * positives) as f64)
}

/// Writes the uncertainty, oracle and random curves as CSV.
pub fn write_curve_csv<W: Write>(
    records: &[EvalRecord],
    max_reject: f64,
    mut sink: W,
) -> Result<(), EvalError> {
    let unc = rejection_curve(records, RejectionOrder::ByUncertainty, max_reject)?;
    let oracle = rejection_curve(records, RejectionOrder::Oracle, max_reject)?;
    writeln!(sink, "reject_fraction,uncertainty,oracle,random")?;
    for (u, o) in unc.iter().zip(&oracle) {
        writeln!(
            sink,
            "{},{},{},{}",
            u.reject_fraction, u.mean_quality, o.mean_quality, oracle[0].mean_quality
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(q: &[f64], u: &[f64]) -> Vec<EvalRecord> {
        q.iter()
            .zip(u)
            .enumerate()
            .map(|(i, (&q, &u))| EvalRecord::new(format!("r{i:03}"), q, u))
            .collect()
    }

    #[test]
    fn flat_curve_for_constant_quality() {
        let r = recs(&[0.7; 6], &[3.0, 1.0, 2.0, 5.0, 4.0, 0.0]);
        for order in [RejectionOrder::ByUncertainty, RejectionOrder::Oracle, RejectionOrder::Random(3)] {
            let c = rejection_curve(&r, order, 0.5).unwrap();
            assert_eq!(c.len(), 4);
            assert!(c.iter().all(|p| p.mean_quality == 0.7));
        }
        let p = prr(&r, 0.5).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.prr, 0.0);
    }

    #[test]
    fn perfect_rejection_of_two() {
        let r = recs(&[0.0, 1.0], &[1.0, 0.0]);
        let c = rejection_curve(&r, RejectionOrder::ByUncertainty, 0.5).unwrap();
        assert_eq!(c[1].mean_quality, 1.0);
        assert_eq!(prr(&r, 0.5).unwrap().prr, 1.0);
    }

    #[test]
    fn ties_break_by_instance_id() {
        let r = recs(&[0.1, 0.9, 0.5], &[1.0, 1.0, 0.0]);
        assert_eq!(rejection_order(&r, RejectionOrder::ByUncertainty), vec![0, 1, 2]);
    }

    #[test]
    fn anti_oracle_is_negative() {
        let q = [0.1, 0.4, 0.35, 0.8, 0.95, 0.2, 0.6, 0.05, 0.7, 0.5];
        let r = recs(&q, &q);
        assert!(prr(&r, 0.5).unwrap().prr < 0.0);
        let neg: Vec<f64> = q.iter().map(|x| -x).collect();
        assert_eq!(prr(&recs(&q, &neg), 0.5).unwrap().prr, 1.0);
    }

    #[test]
    fn roc_auc_extremes() {
        let r = recs(&[0.0, 0.0, 1.0, 1.0], &[0.9, 0.8, 0.1, 0.2]);
        assert_eq!(roc_auc(&r, 0.5).unwrap(), 1.0);
        let r = recs(&[0.0, 1.0, 0.0, 1.0], &[0.3; 4]);
        assert_eq!(roc_auc(&r, 0.5).unwrap(), 0.5);
        let err = roc_auc(&recs(&[1.0, 1.0], &[0.0, 1.0]), 0.5).unwrap_err();
        assert!(matches!(err, EvalError::SingleClass { positives: 2, negatives: 0 }));
    }

    #[test]
    fn input_errors() {
        assert!(matches!(prr(&recs(&[1.0], &[0.0]), 0.5), Err(EvalError::TooFewRecords(1))));
        assert!(matches!(
            prr(&recs(&[1.0, 0.0], &[0.0, 1.0]), 0.0),
            Err(EvalError::MaxReject(_))
        ));
        assert!(matches!(
            prr(&recs(&[1.0, f64::NAN], &[0.0, 1.0]), 0.5),
            Err(EvalError::NonFinite(_))
        ));
    }

    #[test]
    fn csv_has_header_and_grid() {
        let r = recs(&[0.1, 0.9, 0.5, 0.3], &[1.0, 0.0, 0.3, 0.2]);
        let mut out = Vec::new();
        write_curve_csv(&r, 0.5, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "reject_fraction,uncertainty,oracle,random");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("0.5,"));
    }
}
