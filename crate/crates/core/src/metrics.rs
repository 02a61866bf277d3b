//! Multi-label evaluation: mean average precision and per-category / overall
//! F1 over thresholded scores. Unknown annotations are skipped everywhere.

use crate::error::{Error, Result};
use crate::loss::{Label, LabelVector};
use crate::tensor::Tensor;

/// Mean average precision.
///
/// Per class: samples with a known annotation are ranked by score descending
/// (ties broken by sample index), AP is the mean of precision-at-k over the
/// positive ranks, and classes without any positive are skipped. Errors when
/// no class is evaluable.
pub fn mean_average_precision(scores: &Tensor, labels: &[LabelVector]) -> Result<f64> {
    let s = scores.rows();
    let c = scores.cols();
    if labels.len() != s {
        return Err(Error::ShapeMismatch {
            op: "mean_average_precision",
            lhs: scores.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    for class in 0..c {
        let mut ranked: Vec<(f64, bool, usize)> = Vec::new();
        for (i, y) in labels.iter().enumerate() {
            match y.get(class) {
                Label::Pos => ranked.push((scores.get2(i, class), true, i)),
                Label::Neg => ranked.push((scores.get2(i, class), false, i)),
                Label::Unknown => {}
            }
        }
        let positives = ranked.iter().filter(|(_, p, _)| *p).count();
        if positives == 0 {
            continue;
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.2.cmp(&b.2))
        });
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, (_, positive, _)) in ranked.iter().enumerate() {
            if *positive {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / positives as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Contract(
            "no class has a known positive; mAP is undefined".into(),
        ));
    }
    Ok(ap_sum / evaluated as f64)
}

/// Per-category F1 (mean of per-class F1, empty classes scored 0) and overall
/// F1 (pooled TP/FP/FN), binarizing at `threshold` (score ≥ threshold is a
/// positive prediction).
pub fn f1_scores(scores: &Tensor, labels: &[LabelVector], threshold: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::InvalidParameter(format!(
            "F1 threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let s = scores.rows();
    let c = scores.cols();
    if labels.len() != s {
        return Err(Error::ShapeMismatch {
            op: "f1_scores",
            lhs: scores.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut cf1_sum = 0.0;
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for class in 0..c {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (i, y) in labels.iter().enumerate() {
            let label = y.get(class);
            if label == Label::Unknown {
                continue;
            }
            let predicted = scores.get2(i, class) >= threshold;
            match (predicted, label) {
                (true, Label::Pos) => tp += 1,
                (true, Label::Neg) => fp += 1,
                (false, Label::Pos) => fneg += 1,
                (false, Label::Neg) => {}
                (_, Label::Unknown) => unreachable!(),
            }
        }
        let denom = 2 * tp + fp + fneg;
        cf1_sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    let cf1 = cf1_sum / c as f64;
    let pooled = 2 * tp_all + fp_all + fn_all;
    let of1 = if pooled == 0 { 0.0 } else { 2.0 * tp_all as f64 / pooled as f64 };
    Ok((cf1, of1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(rows: &[&[u8]]) -> Vec<LabelVector> {
        rows.iter().map(|r| LabelVector::from_bits(r).unwrap()).collect()
    }

    #[test]
    fn perfect_ranking_gives_map_one() {
        let scores = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.8, 0.9, 0.2, 0.8, 0.1, 0.2]).unwrap();
        let labels = bits(&[&[1, 0], &[1, 1], &[0, 1], &[0, 0]]);
        assert!((mean_average_precision(&scores, &labels).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn worked_single_class_example() {
        // scores [0.9, 0.8, 0.7], labels [0, 1, 1] ⟹ AP = (1/2)(1/2 + 2/3)
        let scores = Tensor::matrix(3, 1, vec![0.9, 0.8, 0.7]).unwrap();
        let labels = bits(&[&[0], &[1], &[1]]);
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert!((map - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_perfect_ranking_is_imperfect() {
        let scores = Tensor::matrix(4, 1, vec![0.1, 0.2, 0.8, 0.9]).unwrap();
        let labels = bits(&[&[1], &[1], &[0], &[0]]);
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert!(map < 1.0);
    }

    #[test]
    fn ties_break_by_sample_index() {
        // equal scores: sample order decides ranks deterministically
        let scores = Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap();
        let labels = bits(&[&[0], &[1]]);
        // positive lands at rank 2 ⟹ AP = 1/2
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert!((map - 0.5).abs() < 1e-15);
    }

    #[test]
    fn class_without_positives_is_skipped() {
        let scores = Tensor::matrix(2, 2, vec![0.9, 0.4, 0.1, 0.6]).unwrap();
        let labels = bits(&[&[1, 0], &[0, 0]]);
        // class 1 skipped, class 0 perfect
        assert!((mean_average_precision(&scores, &labels).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_evaluable_class_errors() {
        let scores = Tensor::matrix(1, 2, vec![0.9, 0.4]).unwrap();
        let labels = bits(&[&[0, 0]]);
        assert!(mean_average_precision(&scores, &labels).is_err());
    }

    #[test]
    fn map_is_invariant_under_monotone_transforms() {
        let scores = Tensor::matrix(5, 2, vec![0.9, 0.2, 0.3, 0.8, 0.6, 0.5, 0.2, 0.9, 0.8, 0.1]).unwrap();
        let labels = bits(&[&[1, 0], &[0, 1], &[1, 1], &[0, 1], &[1, 0]]);
        let base = mean_average_precision(&scores, &labels).unwrap();
        for transform in [|x: f64| 2.0 * x + 1.0, |x: f64| x.exp(), |x: f64| x.powi(3)] {
            let t = Tensor::matrix(5, 2, scores.values().iter().map(|&v| transform(v)).collect()).unwrap();
            let m = mean_average_precision(&t, &labels).unwrap();
            assert!((m - base).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_predictions_give_unit_f1() {
        let scores = Tensor::matrix(3, 2, vec![0.9, 0.1, 0.1, 0.9, 0.9, 0.9]).unwrap();
        let labels = bits(&[&[1, 0], &[0, 1], &[1, 1]]);
        let (cf1, of1) = f1_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!((cf1, of1), (1.0, 1.0));
    }

    #[test]
    fn all_negative_predictions_give_zero_f1() {
        let scores = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let labels = bits(&[&[1, 0], &[0, 1]]);
        let (cf1, of1) = f1_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!((cf1, of1), (0.0, 0.0));
    }

    #[test]
    fn crafted_confusion_counts() {
        // class 0: TP=1, FP=1, FN=0 ⟹ F1 = 2/3; class 1: TP=0, FP=0, FN=1 ⟹ F1 = 0
        // CF1 = 1/3, OF1 = 2·1/(2·1+1+1) = 0.5
        let scores = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.9, 0.2]).unwrap();
        let labels = bits(&[&[1, 1], &[0, 0]]);
        let (cf1, of1) = f1_scores(&scores, &labels, 0.5).unwrap();
        assert!((cf1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((of1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_cf1_equals_of1() {
        let scores = Tensor::matrix(4, 1, vec![0.9, 0.3, 0.7, 0.2]).unwrap();
        let labels = bits(&[&[1], &[1], &[0], &[0]]);
        let (cf1, of1) = f1_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!(cf1, of1);
    }

    #[test]
    fn unknown_labels_are_excluded_from_counts() {
        use crate::loss::Label;
        // second sample predicts class 0 positive; with a known negative it
        // is an FP, with an unknown it must not count at all
        let scores = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.9, 0.9]).unwrap();
        let known = bits(&[&[1, 0], &[0, 1]]);
        let (cf1_known, _) = f1_scores(&scores, &known, 0.5).unwrap();
        assert!(cf1_known < 1.0);

        let masked = vec![
            LabelVector::from_bits(&[1, 0]).unwrap(),
            LabelVector::new(vec![Label::Unknown, Label::Pos]).unwrap(),
        ];
        let (cf1_masked, of1_masked) = f1_scores(&scores, &masked, 0.5).unwrap();
        assert_eq!((cf1_masked, of1_masked), (1.0, 1.0));
    }

    #[test]
    fn threshold_bounds_checked() {
        let scores = Tensor::matrix(1, 1, vec![0.9]).unwrap();
        let labels = bits(&[&[1]]);
        assert!(f1_scores(&scores, &labels, 0.0).is_err());
        assert!(f1_scores(&scores, &labels, 1.0).is_err());
    }
}
