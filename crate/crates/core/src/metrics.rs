//! Evaluation: classification accuracy and precision-recall summaries.
//!
//! Average precision is the all-threshold step-wise area
//! `AP = Σ_i (R_i − R_{i−1}) · P_i` over the curve points in order of
//! decreasing threshold, with `R_0 = 0`. There is no interpolation of
//! precision, so it is not the 11-point VOC measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{forward, Head, MlpParams};
use crate::tensor::Matrix;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    /// Scores at or above this value count as positive predictions.
    pub threshold: f64,
}

/// Points ordered by decreasing threshold, one per distinct score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("no positive labels"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        points.push(PrPoint {
            precision: tp as f64 / seen as f64,
            recall: tp as f64 / positives as f64,
            threshold,
        });
    }
    Ok(PrCurve { points })
}

/// Curve over every entry of a score matrix against binary targets of the
/// same shape.
pub fn pr_curve_matrix(scores: &Matrix, targets: &Matrix) -> Result<PrCurve> {
    if scores.shape() != targets.shape() {
        return Err(Error::invalid(format!(
            "scores {:?} vs targets {:?}",
            scores.shape(),
            targets.shape()
        )));
    }
    let labels: Vec<bool> = targets.data().iter().map(|&t| t >= 0.5).collect();
    pr_curve(scores.data(), &labels)
}

pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in &curve.points {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    ap
}

/// Largest recall among points with precision at least `precision`; 0 if
/// there are none.
pub fn recall_at_precision(curve: &PrCurve, precision: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.precision >= precision)
        .map(|p| p.recall)
        .fold(0.0, f64::max)
}

/// Head output for every row of `features`, computed in chunks.
pub fn predict(params: &MlpParams, features: &Matrix, head: Head) -> Result<Matrix> {
    let mut out = Vec::with_capacity(features.rows() * params.output_dim());
    let mut start = 0;
    while start < features.rows() {
        let end = (start + EVAL_CHUNK).min(features.rows());
        let idx: Vec<usize> = (start..end).collect();
        let trace = forward(params, &features.select_rows(&idx), head, 1.0)?;
        out.extend_from_slice(trace.probs.data());
        start = end;
    }
    Matrix::new(features.rows(), params.output_dim(), out)
}

/// Fraction of rows where the predicted class (argmax, lowest index on
/// ties) equals the labelled class.
pub fn accuracy(probs: &Matrix, labels: &Matrix) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::invalid(format!(
            "predictions {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let hits = probs
        .argmax_rows()
        .iter()
        .zip(labels.argmax_rows())
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(hits as f64 / probs.rows() as f64)
}

pub fn evaluate_accuracy(params: &MlpParams, features: &Matrix, labels: &Matrix) -> Result<f64> {
    if features.rows() == 0 {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    accuracy(&predict(params, features, Head::Softmax)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_curve() {
        let c = pr_curve(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        let pr: Vec<(f64, f64)> = c.points.iter().map(|p| (p.precision, p.recall)).collect();
        assert_eq!(pr, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0), (0.5, 1.0)]);
        // hand computation: 0.5·1 + 0.5·(2/3)
        assert!((average_precision(&c) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(recall_at_precision(&c, 0.6), 1.0);
        assert_eq!(recall_at_precision(&c, 1.0), 0.5);
        assert_eq!(recall_at_precision(&c, 1.1), 0.0);
    }

    #[test]
    fn separated_scores_give_unit_ap() {
        let c = pr_curve(&[0.1, 0.9, 0.8, 0.2], &[false, true, true, false]).unwrap();
        assert_eq!(average_precision(&c), 1.0);
    }

    #[test]
    fn ties_form_one_point() {
        let c = pr_curve(&[0.5, 0.5, 0.5], &[true, false, false]).unwrap();
        assert_eq!(c.points.len(), 1);
        assert!((average_precision(&c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(pr_curve(&[0.1], &[false]).is_err());
        assert!(pr_curve(&[f64::NAN], &[true]).is_err());
        assert!(pr_curve(&[0.1, 0.2], &[true]).is_err());
        assert!(accuracy(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn accuracy_ties_take_lowest() {
        let p = Matrix::from_rows(&[[0.5, 0.5], [0.2, 0.8]]).unwrap();
        let l = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(accuracy(&p, &l).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn curve_invariants(
            data in prop::collection::vec((0u8..20, any::<bool>()), 1..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let mut labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            labels[0] = true;
            let c = pr_curve(&scores, &labels).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
                prop_assert!(w[1].threshold < w[0].threshold);
            }
            for p in &c.points {
                prop_assert!((0.0..=1.0).contains(&p.precision));
            }
            prop_assert_eq!(c.points.last().unwrap().recall, 1.0);
            let ap = average_precision(&c);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }
    }
}
