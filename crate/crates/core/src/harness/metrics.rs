//! Pixel-level precision, recall and F1.

use serde::{Deserialize, Serialize};

use super::config::Aggregation;
use crate::error::{Error, Result};
use crate::maskgen::{BinaryMask, ClassMask, Label};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl EvalMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn from_masks(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::invalid(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        Ok(Self::from_counts(tp, fp, fn_))
    }
}

/// Combines per-image metrics; counts are always summed.
pub fn aggregate(items: &[EvalMetrics], how: Aggregation) -> EvalMetrics {
    let (tp, fp, fn_) = items.iter().fold((0, 0, 0), |a, m| (a.0 + m.tp, a.1 + m.fp, a.2 + m.fn_));
    match how {
        Aggregation::Pooled => EvalMetrics::from_counts(tp, fp, fn_),
        Aggregation::PerImage => {
            let n = items.len().max(1) as f64;
            let mean = |f: fn(&EvalMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
            EvalMetrics {
                tp,
                fp,
                fn_,
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1: mean(|m| m.f1),
            }
        }
    }
}

/// One-vs-rest metrics for the source and target classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub source: EvalMetrics,
    pub target: EvalMetrics,
    /// Fraction of pixels whose label is exactly right.
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn class_metrics(pred: &ClassMask, truth: &ClassMask) -> Result<ClassMetrics> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::invalid("class masks differ in size"));
    }
    let one_vs_rest = |label: Label| {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, t) in pred.labels().iter().zip(truth.labels()) {
            match (*p == label, *t == label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        EvalMetrics::from_counts(tp, fp, fn_)
    };
    let (source, target) = (one_vs_rest(Label::Source), one_vs_rest(Label::Target));
    let correct = pred.labels().iter().zip(truth.labels()).filter(|(p, t)| p == t).count();
    Ok(ClassMetrics {
        source,
        target,
        accuracy: ratio(correct as f64, pred.labels().len() as f64),
        macro_f1: (source.f1 + target.f1) / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_vec(4, 4, bits.iter().map(|b| *b == 1).collect()).unwrap()
    }

    #[test]
    fn hand_built_cases() {
        let truth = mask(&[1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let pred = mask(&[1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let m = EvalMetrics::from_masks(&pred, &truth).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 1));
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        let same = EvalMetrics::from_masks(&truth, &truth).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let empty = EvalMetrics::from_masks(&BinaryMask::new(4, 4), &truth).unwrap();
        assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));
        assert!(EvalMetrics::from_masks(&BinaryMask::new(3, 4), &truth).is_err());
    }

    #[test]
    fn aggregation_modes() {
        let a = EvalMetrics::from_counts(10, 0, 0);
        let b = EvalMetrics::from_counts(0, 5, 5);
        let per = aggregate(&[a, b], Aggregation::PerImage);
        assert!((per.f1 - 0.5).abs() < 1e-12);
        let pooled = aggregate(&[a, b], Aggregation::Pooled);
        assert!((pooled.precision - 10.0 / 15.0).abs() < 1e-12);
        assert_eq!(aggregate(&[b, a], Aggregation::PerImage), per);
        assert_eq!(aggregate(&[], Aggregation::PerImage).f1, 0.0);
    }

    #[test]
    fn class_metrics_on_truth() {
        let mut t = ClassMask::new(4, 4);
        t.set(0, 0, Label::Source);
        t.set(3, 3, Label::Target);
        let m = class_metrics(&t, &t).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        let mut swapped = ClassMask::new(4, 4);
        swapped.set(0, 0, Label::Target);
        swapped.set(3, 3, Label::Source);
        let s = class_metrics(&swapped, &t).unwrap();
        assert_eq!(s.macro_f1, 0.0);
        assert_eq!(s.accuracy, 14.0 / 16.0);
    }

    proptest! {
        #[test]
        fn matches_definitions(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
            let m = EvalMetrics::from_counts(tp, fp, fn_);
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
            prop_assert!((m.precision - p).abs() < 1e-12);
            prop_assert!((m.recall - r).abs() < 1e-12);
            prop_assert!((m.f1 - f).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}
