//! Confusion-matrix accumulation and segmentation scores.
//!
//! Per class `c`: `TP = m[c][c]`, `FP = Σ_{i≠c} m[i][c]`,
//! `FN = Σ_{j≠c} m[c][j]`;
//! precision `TP/(TP+FP)`, recall `TP/(TP+FN)`, F1 `2PR/(P+R)`,
//! IoU `TP/(TP+FP+FN)`, and pixel accuracy `Σ m[i][i] / Σ m[i][j]`.
//! mF1 and mIoU are unweighted means over the classes with
//! `TP+FP+FN > 0`. A zero precision or recall denominator scores 0.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE_LABEL};

/// `counts[i][j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Data(format!(
                "{} counts do not form a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Adds every pixel whose truth is not the ignore label.
    pub fn accumulate(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if truth.dims() != pred.dims() {
            return Err(Error::Data(format!(
                "truth {:?} and prediction {:?} differ in shape",
                truth.dims(),
                pred.dims()
            )));
        }
        let c = self.classes;
        let check = |v: u8, what: &str| -> Result<usize> {
            if (v as usize) < c {
                Ok(v as usize)
            } else {
                Err(Error::Data(format!(
                    "{what} label {v} out of range for {c} classes"
                )))
            }
        };
        let mut add = vec![0u64; c * c];
        for (&t, &p) in truth.data().iter().zip(pred.data()) {
            if t == IGNORE_LABEL {
                continue;
            }
            let t = check(t, "truth")?;
            let p = check(p, "predicted")?;
            add[t * c + p] += 1;
        }
        self.counts.iter_mut().zip(add).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Data(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&i| i != c).map(|i| self.get(i, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&j| j != c).map(|j| self.get(c, j)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// `TP + FP + FN > 0`; absent classes are left out of the means.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub per_class: Vec<ClassScore>,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

impl Scores {
    /// Foreground IoU of a two-class task (class 1).
    pub fn foreground_iou(&self) -> Option<f64> {
        (self.per_class.len() == 2).then(|| self.per_class[1].iou)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores over all classes.
pub fn class_scores(cm: &ConfusionMatrix) -> Scores {
    class_scores_over(cm, None)
}

/// Scores whose means are restricted to `mean_classes` (when given) among
/// the present classes.
pub fn class_scores_over(cm: &ConfusionMatrix, mean_classes: Option<&[usize]>) -> Scores {
    let per_class: Vec<ClassScore> = (0..cm.classes)
        .map(|c| {
            let (tp, fp, fn_) = (cm.true_positives(c), cm.false_positives(c), cm.false_negatives(c));
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                precision,
                recall,
                f1,
                iou: ratio(tp, tp + fp + fn_),
                present: tp + fp + fn_ > 0,
            }
        })
        .collect();
    let included: Vec<&ClassScore> = per_class
        .iter()
        .enumerate()
        .filter(|(c, s)| s.present && mean_classes.map_or(true, |m| m.contains(c)))
        .map(|(_, s)| s)
        .collect();
    let mean = |f: fn(&ClassScore) -> f64| {
        if included.is_empty() {
            0.0
        } else {
            included.iter().map(|s| f(s)).sum::<f64>() / included.len() as f64
        }
    };
    let diag: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    Scores {
        mean_f1: mean(|s| s.f1),
        mean_iou: mean(|s| s.iou),
        pixel_accuracy: ratio(diag, cm.total()),
        per_class,
    }
}

/// Per-class rows `class,precision,recall,f1,iou`, then summary rows `mF1`,
/// `mIoU`, `PA` (plus `IoU` for two-class tasks) carrying their value in the
/// second column.
pub fn scores_csv(scores: &Scores, class_names: &[String]) -> String {
    let mut out = String::from("class,precision,recall,f1,iou\n");
    for (c, s) in scores.per_class.iter().enumerate() {
        let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let _ = writeln!(
            out,
            "{name},{:.6},{:.6},{:.6},{:.6}",
            s.precision, s.recall, s.f1, s.iou
        );
    }
    let _ = writeln!(out, "mF1,{:.6},,,", scores.mean_f1);
    let _ = writeln!(out, "mIoU,{:.6},,,", scores.mean_iou);
    let _ = writeln!(out, "PA,{:.6},,,", scores.pixel_accuracy);
    if let Some(iou) = scores.foreground_iou() {
        let _ = writeln!(out, "IoU,{iou:.6},,,");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> LabelMap {
        LabelMap::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let t = labels(&[0, 1, 2, 2, 1, IGNORE_LABEL]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&t, &labels(&[0, 1, 2, 2, 1, 0])).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 2, 0, 0, 0, 2]);
        assert_eq!(cm.total(), 5);
        let s = class_scores(&cm);
        assert!(s.per_class.iter().all(|c| c.f1 == 1.0 && c.iou == 1.0));
        assert_eq!((s.mean_f1, s.mean_iou, s.pixel_accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn off_diagonal_definition() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(&[0; 10]), &labels(&[1; 10])).unwrap();
        assert_eq!(cm.get(0, 1), 10);
        assert_eq!(cm.total(), 10);
    }

    #[test]
    fn hand_computed_two_class() {
        let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 1, 9]).unwrap();
        let s = class_scores(&cm);
        let c0 = s.per_class[0];
        assert!((c0.precision - 8.0 / 9.0).abs() < 1e-15);
        assert!((c0.recall - 0.8).abs() < 1e-15);
        assert!((c0.iou - 8.0 / 11.0).abs() < 1e-15);
        assert!((s.pixel_accuracy - 0.85).abs() < 1e-15);
        assert_eq!(s.foreground_iou(), Some(s.per_class[1].iou));
    }

    #[test]
    fn absent_class_excluded_from_means() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 2, 4, 0, 0, 0, 0]).unwrap();
        let s = class_scores(&cm);
        assert!(!s.per_class[2].present);
        let expect = (s.per_class[0].iou + s.per_class[1].iou) / 2.0;
        assert!((s.mean_iou - expect).abs() < 1e-15);
        // predicted but never true: present, scores 0
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 1, 0, 4, 0, 0, 0, 0]).unwrap();
        let s = class_scores(&cm);
        assert!(s.per_class[2].present);
        assert_eq!(s.per_class[2].precision, 0.0);
        assert_eq!(s.per_class[2].recall, 0.0);
    }

    #[test]
    fn mean_class_restriction() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 2, 4, 0, 0, 3, 3]).unwrap();
        let s = class_scores_over(&cm, Some(&[0, 1]));
        let all = class_scores(&cm);
        assert!((s.mean_iou - (all.per_class[0].iou + all.per_class[1].iou) / 2.0).abs() < 1e-15);
        assert_eq!(s.pixel_accuracy, all.pixel_accuracy);
    }

    #[test]
    fn out_of_range_names_value() {
        let mut cm = ConfusionMatrix::new(3);
        let err = cm.accumulate(&labels(&[0, 9]), &labels(&[0, 0])).unwrap_err();
        assert!(err.to_string().contains('9'));
        let err = cm.accumulate(&labels(&[0, 1]), &labels(&[0, 3])).unwrap_err();
        assert!(err.to_string().contains('3'));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn csv_shape() {
        let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 1, 9]).unwrap();
        let csv = scores_csv(&class_scores(&cm), &["ground".into(), "building".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,precision,recall,f1,iou");
        assert!(lines[1].starts_with("ground,0.888889,0.800000,"));
        assert_eq!(lines[5], "PA,0.850000,,,");
        assert!(lines[6].starts_with("IoU,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
    }
}
