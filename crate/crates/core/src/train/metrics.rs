//! Ranking and recall metrics.
//!
//! Averages are accumulated as exact fractions and rounded once, so a
//! metric is the correctly rounded value of its rational definition.

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{CheckedAdd, CheckedDiv, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::heads::ActionPrediction;

/// Exact rational: machine-sized while it fits, arbitrary precision after.
#[derive(Clone, Debug)]
enum Exact {
    Small(Ratio<i128>),
    Big(BigRational),
}

impl Exact {
    fn zero() -> Self {
        Self::Small(Ratio::zero())
    }

    fn frac(n: usize, d: usize) -> Self {
        Self::Small(Ratio::new(n as i128, d as i128))
    }

    fn big(&self) -> BigRational {
        match self {
            Self::Small(r) => BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom())),
            Self::Big(b) => b.clone(),
        }
    }

    fn add(&self, other: &Self) -> Self {
        if let (Self::Small(a), Self::Small(b)) = (self, other) {
            if let Some(s) = a.checked_add(b) {
                return Self::Small(s);
            }
        }
        Self::Big(self.big() + other.big())
    }

    fn div(&self, k: usize) -> Self {
        if let Self::Small(a) = self {
            if let Some(q) = a.checked_div(&Ratio::from_integer(k as i128)) {
                return Self::Small(q);
            }
        }
        Self::Big(self.big() / BigRational::from_integer(BigInt::from(k)))
    }

    fn to_f64(&self) -> f64 {
        match self {
            Self::Small(r) => r.to_f64(),
            Self::Big(b) => b.to_f64(),
        }
        .expect("finite ratio")
    }
}

fn ap_exact(scores: &[f64], positive: &[bool]) -> Option<Exact> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut sum = Exact::zero();
    for (i, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        let s = scores[i];
        let above = scores.iter().filter(|&&x| x >= s).count();
        let pos_above = scores.iter().zip(positive).filter(|(&x, &p)| p && x >= s).count();
        sum = sum.add(&Exact::frac(pos_above, above));
    }
    Some(sum.div(n_pos))
}

/// Average precision of one class over a ranked set.
///
/// Ties are resolved pessimistically: the precision credited to a positive
/// with score `s` counts every item scoring `≥ s`. `None` when there is no
/// positive.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    ap_exact(scores, positive).map(|e| e.to_f64())
}

fn recall_exact(predicted: &[Vec<usize>], labels: &[Vec<usize>], c: usize) -> Option<Exact> {
    let mut pos = 0;
    let mut hit = 0;
    for (p, l) in predicted.iter().zip(labels) {
        if l.contains(&c) {
            pos += 1;
            if p.contains(&c) {
                hit += 1;
            }
        }
    }
    (pos > 0).then(|| Exact::frac(hit, pos))
}

/// Recall of class `c` at the predicted label sets; `None` without positives.
pub fn class_recall(predicted: &[Vec<usize>], labels: &[Vec<usize>], c: usize) -> Option<f64> {
    recall_exact(predicted, labels, c).map(|e| e.to_f64())
}

fn mean_defined(v: &[Option<Exact>]) -> f64 {
    let d: Vec<&Exact> = v.iter().flatten().collect();
    if d.is_empty() {
        return 0.0;
    }
    d.iter().fold(Exact::zero(), |acc, x| acc.add(x)).div(d.len()).to_f64()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_videos: usize,
    /// Fraction of videos whose predicted label set equals the truth.
    pub accuracy: f64,
    pub map: f64,
    pub mar: f64,
    /// Mean number of retained tokens per video.
    pub num: f64,
    pub mean_valid: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_recall: Vec<Option<f64>>,
    /// Classes with no positive in the evaluated set (left out of the means).
    pub missing_classes: Vec<usize>,
    /// Share of planted key tokens that survived selection.
    pub key_recall: Option<f64>,
}

/// Per-video evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub prediction: ActionPrediction,
    pub labels: Vec<usize>,
    pub retained: f64,
    pub valid: usize,
    pub key_total: usize,
    pub key_kept: usize,
}

pub fn compute_metrics(items: &[EvalItem], num_classes: usize) -> MetricsReport {
    let n = items.len();
    if n == 0 {
        return MetricsReport::default();
    }
    let labels: Vec<Vec<usize>> = items.iter().map(|i| i.labels.clone()).collect();
    let predicted: Vec<Vec<usize>> = items.iter().map(|i| i.prediction.predicted()).collect();
    let ap: Vec<Option<Exact>> = (0..num_classes)
        .map(|c| {
            let scores: Vec<f64> = items.iter().map(|i| i.prediction.scores[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
            ap_exact(&scores, &pos)
        })
        .collect();
    let recall: Vec<Option<Exact>> = (0..num_classes).map(|c| recall_exact(&predicted, &labels, c)).collect();
    let missing_classes: Vec<usize> = (0..num_classes).filter(|&c| ap[c].is_none()).collect();
    if !missing_classes.is_empty() {
        log::warn!("classes {missing_classes:?} have no positives in this split and are left out of mAP/mAR");
    }
    let correct = predicted
        .iter()
        .zip(&labels)
        .filter(|(p, l)| {
            let mut l = (*l).clone();
            l.sort_unstable();
            **p == l
        })
        .count();
    let key_total: usize = items.iter().map(|i| i.key_total).sum();
    let key_kept: usize = items.iter().map(|i| i.key_kept).sum();
    MetricsReport {
        n_videos: n,
        accuracy: correct as f64 / n as f64,
        map: mean_defined(&ap),
        mar: mean_defined(&recall),
        num: items.iter().map(|i| i.retained).sum::<f64>() / n as f64,
        mean_valid: items.iter().map(|i| i.valid as f64).sum::<f64>() / n as f64,
        per_class_ap: ap.iter().map(|a| a.as_ref().map(Exact::to_f64)).collect(),
        per_class_recall: recall.iter().map(|r| r.as_ref().map(Exact::to_f64)).collect(),
        missing_classes,
        key_recall: (key_total > 0).then(|| key_kept as f64 / key_total as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.8, 0.9], &[true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.8, 0.9], &[false, false]), None);
        // tie: pessimistic
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(0.5));
    }

    #[test]
    fn recall_and_accuracy() {
        let item = |scores: Vec<f64>, labels: Vec<usize>| EvalItem {
            prediction: ActionPrediction {
                scores,
                multi_label: false,
            },
            labels,
            retained: 3.0,
            valid: 4,
            key_total: 2,
            key_kept: 1,
        };
        let items = vec![item(vec![0.7, 0.3], vec![0]), item(vec![0.6, 0.4], vec![1])];
        let m = compute_metrics(&items, 2);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class_recall, vec![Some(1.0), Some(0.0)]);
        assert_eq!(m.mar, 0.5);
        assert_eq!(m.num, 3.0);
        assert_eq!(m.key_recall, Some(0.5));
    }
}
