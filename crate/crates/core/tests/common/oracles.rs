//! Slow, direct reference implementations used to cross-check the library.
#![allow(dead_code)]

use lsrvae::score::SLOTS;
use lsrvae::{Measure, MetricalWeightProfile, Token};

/// Onset slots and pitches read straight off the token array.
pub fn notes(m: &Measure) -> Vec<(usize, i64)> {
    m.tokens()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match t {
            Token::Note(p) => Some((i, *p as i64)),
            _ => None,
        })
        .collect()
}

/// Best metricity over every way of placing `n` onsets, by exhaustive DP over slots.
fn best_metricity(weights: &[u32; SLOTS], n: usize) -> u64 {
    // best[k] = highest weight sum using exactly k of the slots seen so far
    let mut best = vec![None::<u64>; n + 1];
    best[0] = Some(0);
    for w in weights {
        for k in (1..=n).rev() {
            if let Some(prev) = best[k - 1] {
                let cand = prev + *w as u64;
                if best[k].is_none_or(|b| cand > b) {
                    best[k] = Some(cand);
                }
            }
        }
    }
    best[n].unwrap()
}

pub fn rhythmic_complexity(m: &Measure, profile: &MetricalWeightProfile) -> f64 {
    let onsets = notes(m);
    if onsets.is_empty() {
        return 0.0;
    }
    let w = profile.weights();
    let actual: u64 = onsets.iter().map(|(s, _)| w[*s] as u64).sum();
    (best_metricity(w, onsets.len()) - actual) as f64
}

pub fn note_range(m: &Measure) -> u32 {
    let mut p: Vec<i64> = notes(m).into_iter().map(|n| n.1).collect();
    p.sort();
    match (p.first(), p.last()) {
        (Some(lo), Some(hi)) => (hi - lo) as u32,
        _ => 0,
    }
}

pub fn note_density(m: &Measure) -> u32 {
    m.tokens().iter().filter(|t| matches!(t, Token::Note(_))).count() as u32
}

pub fn avg_interval_jump(m: &Measure) -> f64 {
    let p: Vec<i64> = notes(m).into_iter().map(|n| n.1).collect();
    if p.len() < 2 {
        return 0.0;
    }
    let mut total = 0i64;
    for i in 1..p.len() {
        total += (p[i] - p[i - 1]).abs();
    }
    total as f64 / (p.len() - 1) as f64
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Double loop over every ordered pair, diagonal included.
pub fn lsr(dims: &[f64], attrs: &[f64]) -> f64 {
    let n = dims.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = (dims[i] - dims[j]).tanh() - sgn(attrs[i] - attrs[j]);
            total += d * d;
        }
    }
    total / (n * n) as f64
}

/// Closed-form KL of a diagonal Gaussian against N(0, I).
pub fn kl(mu: &[f64], log_variance: &[f64]) -> f64 {
    mu.iter().zip(log_variance).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// Cross-entropy of one row of logits against a target index.
pub fn cross_entropy(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    log_sum - row[target]
}
