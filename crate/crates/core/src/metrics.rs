//! Detection metrics: accuracy, average precision, equal error rate.
//!
//! A score at or above the threshold predicts fake (label 1).

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus<S: Scalar>(z: S) -> S {
    z.max(S::zero()) + (-z.abs()).exp().ln_1p()
}

/// Scores paired with binary labels; both classes present, all scores finite.
#[derive(Debug, Clone, Copy)]
pub struct ScoredLabels<'a, S> {
    scores: &'a [S],
    labels: &'a [u8],
}

impl<'a, S: Scalar> ScoredLabels<'a, S> {
    pub fn new(scores: &'a [S], labels: &'a [u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidDump("labels must be 0 or 1".into()));
        }
        if !labels.contains(&0) || !labels.contains(&1) {
            return Err(Error::SingleClass);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Operating points from the strictest threshold down: cumulative
    /// (true positives, false positives) after each group of tied scores.
    fn operating_points(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (pos, &i) in order.iter().enumerate() {
            if self.labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_group = order.get(pos + 1).is_none_or(|&j| self.scores[j] != self.scores[i]);
            if last_of_group {
                points.push((tp, fp));
            }
        }
        points
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.len() - pos)
    }
}

pub fn accuracy<S: Scalar>(sl: &ScoredLabels<'_, S>, threshold: S) -> S {
    let correct = sl.scores.iter().zip(sl.labels).filter(|(&s, &l)| (s >= threshold) == (l == 1)).count();
    S::of_usize(correct) / S::of_usize(sl.len())
}

/// Step-wise average precision: Σ (R_n − R_{n−1}) · P_n over tie-grouped operating points.
pub fn average_precision<S: Scalar>(sl: &ScoredLabels<'_, S>) -> S {
    let (pos, _) = sl.class_counts();
    // sum Δtp · P_n first and divide once, so a perfect ranking gives exactly 1
    let mut acc = S::zero();
    let mut prev_tp = 0;
    for (tp, fp) in sl.operating_points() {
        if tp > prev_tp {
            let precision = S::of_usize(tp) / S::of_usize(tp + fp);
            acc = acc + S::of_usize(tp - prev_tp) * precision;
            prev_tp = tp;
        }
    }
    acc / S::of_usize(pos)
}

/// Equal error rate: the point where the piecewise-linear (FPR, FNR) curve
/// through the operating points crosses FPR = FNR.
pub fn equal_error_rate<S: Scalar>(sl: &ScoredLabels<'_, S>) -> S {
    let (pos, neg) = sl.class_counts();
    let (pos, neg) = (S::of_usize(pos), S::of_usize(neg));
    // threshold above every score: nothing flagged
    let mut prev = (S::zero(), S::one());
    for (tp, fp) in sl.operating_points() {
        let fpr = S::of_usize(fp) / neg;
        let fnr = S::one() - S::of_usize(tp) / pos;
        if fpr >= fnr {
            let gap_prev = prev.1 - prev.0;
            let gap_cur = fnr - fpr;
            let t = gap_prev / (gap_prev - gap_cur);
            return prev.0 + t * (fpr - prev.0);
        }
        prev = (fpr, fnr);
    }
    // the last operating point flags everything (FPR = 1, FNR = 0), so the loop always returns
    unreachable!("operating points end at FPR = 1")
}

/// ACC at threshold 0.5 on probabilities, AP, EER.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionMetrics<S> {
    pub acc: S,
    pub ap: S,
    pub eer: S,
}

impl<S: Scalar> DetectionMetrics<S> {
    pub fn from_probabilities(probs: &[S], labels: &[u8]) -> Result<Self> {
        let sl = ScoredLabels::new(probs, labels)?;
        Ok(Self { acc: accuracy(&sl, S::of(0.5)), ap: average_precision(&sl), eer: equal_error_rate(&sl) })
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self { acc: self.acc - other.acc, ap: self.ap - other.ap, eer: self.eer - other.eer }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sl<'a>(s: &'a [f64], l: &'a [u8]) -> ScoredLabels<'a, f64> {
        ScoredLabels::new(s, l).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.7f64) + sigmoid(-3.7) - 1.0).abs() < 1e-15);
        let big = sigmoid(700.0f64);
        assert_eq!(big, 1.0);
        assert!(sigmoid(-700.0f64) > 0.0);
        assert!(sigmoid(-745.0f64).is_finite());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&sl(&[0.9, 0.1], &[1, 0]), 0.5), 1.0);
        assert_eq!(accuracy(&sl(&[0.9, 0.1], &[0, 1]), 0.5), 0.0);
        assert_eq!(accuracy(&sl(&[0.9, 0.6, 0.4, 0.1], &[1, 0, 1, 0]), 0.5), 0.5);
        // inclusive threshold
        assert_eq!(accuracy(&sl(&[0.5, 0.1], &[1, 0]), 0.5), 1.0);
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&sl(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]));
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&sl(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])), 1.0);
        assert!((average_precision(&sl(&[0.9, 0.8], &[0, 1])) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_ties_share_operating_point() {
        // all tied: one operating point at recall 1, precision = prevalence
        let ap = average_precision(&sl(&[0.3, 0.3, 0.3, 0.3], &[1, 0, 0, 0]));
        assert!((ap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn eer_examples() {
        assert_eq!(equal_error_rate(&sl(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])), 0.0);
        let e = equal_error_rate(&sl(&[0.9, 0.8, 0.7, 0.35, 0.2, 0.1], &[1, 1, 0, 1, 0, 0]));
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(equal_error_rate(&sl(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0])), 0.5);
    }

    #[test]
    fn eer_interpolates_between_points() {
        // (FPR, FNR) points: (0, 1) -> (0, .5) -> (.5, .5)
        let e = equal_error_rate(&sl(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]));
        assert!((e - 0.5).abs() < 1e-12);
        // crossing falls between (1/3, 1/2) and (2/3, 1/2)
        let e = equal_error_rate(&sl(&[0.9, 0.8, 0.7, 0.6, 0.5], &[1, 0, 0, 1, 0]));
        assert!((e - 0.5).abs() < 1e-12);
        // inverted detector
        assert_eq!(equal_error_rate(&sl(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0])), 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ScoredLabels::new(&[0.1f64], &[1, 0]).is_err());
        assert!(ScoredLabels::new(&[0.1f64, 0.2], &[1, 1]).is_err());
        assert!(ScoredLabels::new(&[f64::NAN, 0.2], &[1, 0]).is_err());
    }

    #[test]
    fn works_in_f32() {
        let s = [0.9f32, 0.8, 0.4, 0.3];
        let sl = ScoredLabels::new(&s, &[1, 0, 1, 0]).unwrap();
        assert!((average_precision(&sl) - 5.0 / 6.0).abs() < 1e-6);
    }
}
