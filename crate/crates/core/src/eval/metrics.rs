//! Rank-based retrieval metrics over one query's score row.
//!
//! Rankings sort by descending score and break ties by ascending utterance
//! id, so every metric here is a function of the induced order alone.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions of `scores` in retrieval order.
pub fn ranking(scores: &[f64], ids: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    order
}

/// Number of adjacent equal-score pairs in a ranking.
pub fn count_ties(scores: &[f64], order: &[usize]) -> usize {
    order.windows(2).filter(|w| scores[w[0]] == scores[w[1]]).count()
}

pub fn precision_at_k(scores: &[f64], labels: &[bool], ids: &[u32], k: usize) -> Result<f64> {
    if k == 0 || scores.len() < k {
        return Err(Error::Evaluation(format!(
            "precision at {k} needs at least {k} utterances, got {}",
            scores.len()
        )));
    }
    let order = ranking(scores, ids);
    let hits = order[..k].iter().filter(|&&i| labels[i]).count();
    Ok(hits as f64 / k as f64)
}

/// Precision at the query's positive count; `None` when it has no positives.
pub fn precision_at_n(scores: &[f64], labels: &[bool], ids: &[u32]) -> Option<f64> {
    let n = labels.iter().filter(|&&l| l).count();
    if n == 0 {
        return None;
    }
    precision_at_k(scores, labels, ids, n).ok()
}

/// Recall within the top `k`; `None` when there are no positives.
pub fn recall_at_k(scores: &[f64], labels: &[bool], ids: &[u32], k: usize) -> Option<f64> {
    let n = labels.iter().filter(|&&l| l).count();
    if n == 0 || k > scores.len() {
        return None;
    }
    let order = ranking(scores, ids);
    let hits = order[..k].iter().filter(|&&i| labels[i]).count();
    Some(hits as f64 / n as f64)
}

/// Mean over positive ranks `r` of precision at `r`; `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool], ids: &[u32]) -> Option<f64> {
    let order = ranking(scores, ids);
    ranked_ap(order.iter().map(|&i| labels[i]))
}

pub(crate) fn ranked_ap(ranked: impl Iterator<Item = bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, rel) in ranked.enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// 1-based ranks with ties sharing the average of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Tie-corrected Spearman correlation between scores and vote counts: the
/// Pearson correlation of average ranks. `None` when either side is constant
/// or there are fewer than two utterances.
pub fn spearman_rho(scores: &[f64], votes: &[u8]) -> Option<f64> {
    if scores.len() < 2 || scores.len() != votes.len() {
        return None;
    }
    let v: Vec<f64> = votes.iter().map(|&x| x as f64).collect();
    pearson(&average_ranks(scores), &average_ranks(&v))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn tally(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Counts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2 TP / (2 TP + FP + FN)`: zero when nothing was predicted but
    /// positives exist, one when there is nothing to find and nothing predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Micro F1 over all rows, or the mean of per-row F1 when `macro_avg`.
pub fn f1_score(pred: &[Vec<bool>], truth: &[Vec<bool>], macro_avg: bool) -> Result<f64> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Alignment("prediction and truth tables differ in shape".into()));
    }
    if pred.is_empty() {
        return Err(Error::Evaluation("F-score over an empty table".into()));
    }
    if macro_avg {
        let sum: f64 = pred.iter().zip(truth).map(|(p, t)| Counts::tally(p, t).f1()).sum();
        return Ok(sum / pred.len() as f64);
    }
    let mut c = Counts::default();
    for (p, t) in pred.iter().zip(truth) {
        c.add(Counts::tally(p, t));
    }
    Ok(c.f1())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<u32> {
        (0..n as u32).collect()
    }

    #[test]
    fn precision_cases() {
        let s = [0.9, 0.8, 0.7, 0.6];
        let l = [true, false, true, false];
        assert_eq!(precision_at_k(&s, &l, &ids(4), 2).unwrap(), 0.5);
        assert!(precision_at_k(&s, &l, &ids(4), 5).is_err());
        let none = [false; 12];
        let s12: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(precision_at_k(&s12, &none, &ids(12), 10).unwrap(), 0.0);
        assert_eq!(precision_at_n(&s12, &none, &ids(12)), None);
    }

    #[test]
    fn ap_hand_enumeration() {
        let s = [0.9, 0.5, 0.1];
        let l = [true, false, true];
        let ap = average_precision(&s, &l, &ids(3)).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.2, 0.9], &[false, true], &ids(2)), Some(1.0));
    }

    #[test]
    fn tie_break_is_ascending_id() {
        let s = [0.5, 0.5, 0.5];
        assert_eq!(ranking(&s, &[7, 3, 5]), vec![1, 2, 0]);
    }

    #[test]
    fn spearman_cases() {
        let s = [0.1, 0.4, 0.5, 0.9];
        assert!((spearman_rho(&s, &[0, 1, 2, 5]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&s, &[5, 2, 1, 0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman_rho(&s, &[3, 3, 3, 3]), None);
        assert_eq!(average_ranks(&[5.0, 5.0, 0.0, 2.0]), vec![3.5, 3.5, 1.0, 2.0]);
    }

    #[test]
    fn f1_conventions() {
        let t = vec![vec![true, false, true]];
        assert_eq!(f1_score(&t, &t, false).unwrap(), 1.0);
        let none = vec![vec![false; 3]];
        assert_eq!(f1_score(&none, &t, false).unwrap(), 0.0);
        assert!(f1_score(&[], &[], false).is_err());
    }
}
