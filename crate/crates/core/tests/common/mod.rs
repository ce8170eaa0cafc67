//! Independent reference implementations used by the integration tests.
//! They favour the most literal formulation over speed.
#![allow(dead_code)]

use std::cmp::Ordering;

use dlmuq_core::eval::EvalRecord;
use dlmuq_core::trace::{InstanceTrace, TokenId};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

pub fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

pub fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(n.into(), d.into())
}

pub fn round(x: &BigRational) -> f64 {
    x.to_f64().unwrap()
}

pub fn content_len(trace: &InstanceTrace) -> usize {
    let v = trace.vocab();
    trace
        .final_tokens
        .iter()
        .flatten()
        .filter(|&&t| t != v.mask_id && !v.special_ids.contains(&t))
        .count()
}

fn block_is_valid(trace: &InstanceTrace, b: usize) -> bool {
    let v = trace.vocab();
    trace.final_tokens[b]
        .iter()
        .any(|&t| t != v.mask_id && !v.special_ids.contains(&t))
}

/// Mean over valid-block steps of the per-step position mean of `f`.
pub fn replay_trajectory(trace: &InstanceTrace, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut total = 0.0;
    let mut steps = 0;
    for b in 0..trace.final_tokens.len() {
        if !block_is_valid(trace, b) {
            continue;
        }
        for t in 1..=trace.steps_per_block[b] {
            let rec = trace
                .steps
                .iter()
                .find(|s| s.block as usize == b && s.step == t)
                .unwrap();
            let mut step_total = 0.0;
            for p in &rec.positions {
                step_total += f(p.argmax_logprob, p.entropy);
            }
            total += step_total / rec.positions.len() as f64;
            steps += 1;
        }
    }
    total / steps as f64
}

pub fn replay_traj_nll(trace: &InstanceTrace) -> f64 {
    replay_trajectory(trace, |lp, _| -lp)
}

pub fn replay_traj_entropy(trace: &InstanceTrace) -> f64 {
    replay_trajectory(trace, |_, h| h)
}

pub fn replay_commit_nll(trace: &InstanceTrace) -> f64 {
    let v = trace.vocab();
    let mut total = 0.0;
    for s in &trace.steps {
        for p in s.positions.iter().filter(|p| p.committed_now) {
            let tok = trace.final_tokens[s.block as usize][p.position as usize];
            if tok != v.mask_id && !v.special_ids.contains(&tok) {
                total -= p.argmax_logprob;
            }
        }
    }
    total / content_len(trace) as f64
}

pub fn replay_nfe(trace: &InstanceTrace) -> f64 {
    trace.steps.len() as f64
}

pub fn replay_remask(trace: &InstanceTrace) -> f64 {
    let mut events = 0;
    for s in &trace.steps {
        for p in &s.positions {
            if p.remasked_now {
                events += 1;
            }
        }
    }
    events as f64 / trace.steps.len() as f64
}

pub fn replay_flip_count(trace: &InstanceTrace) -> f64 {
    let mut flips = 0;
    for b in 0..trace.final_tokens.len() {
        for t in 1..trace.steps_per_block[b] {
            let find = |step: u32| {
                trace
                    .steps
                    .iter()
                    .find(|s| s.block as usize == b && s.step == step)
                    .unwrap()
            };
            let (a, c) = (find(t), find(t + 1));
            for k in 0..a.positions.len() {
                if a.positions[k].argmax_token != c.positions[k].argmax_token {
                    flips += 1;
                }
            }
        }
    }
    flips as f64 / content_len(trace) as f64
}

/// Rejection order by repeated selection of the next record to drop.
pub fn brute_order(records: &[EvalRecord], by_quality: bool) -> Vec<usize> {
    let mut left: Vec<usize> = (0..records.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (&records[left[j]], &records[left[best]]);
            let before = if by_quality {
                a.quality < b.quality || (a.quality == b.quality && a.instance_id < b.instance_id)
            } else {
                a.uncertainty > b.uncertainty
                    || (a.uncertainty == b.uncertainty && a.instance_id < b.instance_id)
            };
            if before {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Retained-mean curve with exact rational means.
pub fn brute_curve(records: &[EvalRecord], by_quality: bool, max_reject: f64) -> Vec<f64> {
    let n = records.len();
    let k_max = ((max_reject * n as f64).floor() as usize).min(n - 1);
    let order = brute_order(records, by_quality);
    (0..=k_max)
        .map(|k| {
            let mut sum = BigRational::zero();
            for &i in &order[k..] {
                sum += rational(records[i].quality);
            }
            round(&(sum / ratio(n - k, 1)))
        })
        .collect()
}

fn brute_area(curve: &[f64], n: usize) -> f64 {
    let mut sum = BigRational::zero();
    for k in 0..curve.len() - 1 {
        sum += rational(curve[k]) + rational(curve[k + 1]);
    }
    round(&(sum / ratio(2 * n, 1)))
}

pub fn brute_prr(records: &[EvalRecord], max_reject: f64) -> f64 {
    let n = records.len();
    let unc = brute_curve(records, false, max_reject);
    let oracle = brute_curve(records, true, max_reject);
    let random = vec![oracle[0]; oracle.len()];
    let (au, ao, ar) = (brute_area(&unc, n), brute_area(&oracle, n), brute_area(&random, n));
    if ao - ar > 1e-12 * ao.abs().max(ar.abs()) {
        (au - ar) / (ao - ar)
    } else {
        0.0
    }
}

/// Pairwise ROC-AUC: P(u_neg > u_pos) + P(tie)/2.
pub fn brute_auc(records: &[EvalRecord], threshold: f64) -> f64 {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for a in records.iter().filter(|r| r.quality < threshold) {
        for b in records.iter().filter(|r| r.quality >= threshold) {
            pairs += 1;
            twice_wins += match a.uncertainty.partial_cmp(&b.uncertainty).unwrap() {
                Ordering::Greater => 2,
                Ordering::Equal => 1,
                Ordering::Less => 0,
            };
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

/// Marginals of a table over `V^L` given partially observed `z`, by
/// filtering every sequence.
pub fn brute_marginals(table: &[f64], v: usize, l: usize, z: &[Option<TokenId>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; v]; l];
    let mut total = 0.0;
    for (idx, &p) in table.iter().enumerate() {
        let y = decode(idx, v, l);
        if z.iter().zip(&y).all(|(a, b)| a.is_none_or(|a| a == *b)) {
            total += p;
            for i in 0..l {
                out[i][y[i] as usize] += p;
            }
        }
    }
    for row in &mut out {
        for p in row.iter_mut() {
            *p /= total;
        }
    }
    out
}

pub fn decode(mut idx: usize, v: usize, l: usize) -> Vec<TokenId> {
    let mut y = vec![0; l];
    for i in (0..l).rev() {
        y[i] = (idx % v) as TokenId;
        idx /= v;
    }
    y
}
