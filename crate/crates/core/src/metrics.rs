//! Confusion counting over the changed class and the derived scores.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Pixel tallies with "changed" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds one prediction/ground-truth pair.
    pub fn accumulate(mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!(
                "prediction is {:?} but ground truth is {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let mut hist = [0u64; 4];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            hist[((p as usize) << 1) | g as usize] += 1;
        }
        self.tn += hist[0b00];
        self.fn_ += hist[0b01];
        self.fp += hist[0b10];
        self.tp += hist[0b11];
        Ok(self)
    }

    pub fn merge(self, other: ConfusionCounts) -> Self {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn finalize(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::numerical("cannot score an empty confusion matrix"));
        }
        let nothing = self.tp + self.fp + self.fn_ == 0;
        let ratio = |num: u64, den: u64| -> f64 {
            if den == 0 {
                if nothing {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        // 2PR/(P+R) written over counts: 2tp / (2tp + fp + fn).
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        let iou = ratio(self.tp, self.tp + self.fp + self.fn_);
        let oa = (self.tp + self.tn) as f64 / total as f64;
        Ok(Scores {
            f1,
            precision,
            recall,
            iou,
            oa,
        })
    }
}

pub fn accumulate(c: ConfusionCounts, pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    c.accumulate(pred, gt)
}

pub fn merge(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts {
    a.merge(b)
}

pub fn finalize(c: &ConfusionCounts) -> Result<Scores> {
    c.finalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub oa: f64,
}

impl Scores {
    /// Flat JSON object with six-decimal values.
    pub fn to_report(&self) -> String {
        let mut s = String::from("{\n");
        let fields = [
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
            ("iou", self.iou),
            ("oa", self.oa),
        ];
        for (i, (k, v)) in fields.iter().enumerate() {
            let sep = if i + 1 < fields.len() { "," } else { "" };
            let _ = writeln!(s, "  \"{k}\": {v:.6}{sep}");
        }
        s.push_str("}\n");
        s
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_report()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    fn loop_counts(pred: &BinaryMask, gt: &BinaryMask) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for r in 0..pred.height() {
            for col in 0..pred.width() {
                match (pred.get(r, col), gt.get(r, col)) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
        }
        c
    }

    #[test]
    fn accumulate_examples() {
        let ones = BinaryMask::from_fn(4, 4, |_, _| true);
        let c = accumulate(ConfusionCounts::default(), &ones, &ones).unwrap();
        assert_eq!(c.tp, 16);
        let c = accumulate(ConfusionCounts::default(), &BinaryMask::from_fn(2, 2, |_, _| true), &BinaryMask::zeros(2, 2)).unwrap();
        assert_eq!(c, counts(0, 4, 0, 0));
        assert!(accumulate(c, &BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 3)).is_err());
    }

    #[test]
    fn hand_confusion_matrix() {
        let s = counts(2, 1, 1, 12).finalize().unwrap();
        assert_abs_diff_eq!(s.precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.recall, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.f1, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.iou, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.oa, 0.875, epsilon = 1e-12);
    }

    #[test]
    fn reference_row_consistency() {
        let (p, r) = (0.8784f64, 0.8708f64);
        let f1 = 2.0 * p * r / (p + r);
        assert_abs_diff_eq!(f1, 0.8746, epsilon = 1e-4);
        assert_abs_diff_eq!(f1 / (2.0 - f1), 0.7772, epsilon = 1e-4);
    }

    #[test]
    fn zero_denominators() {
        let s = counts(0, 0, 0, 10).finalize().unwrap();
        assert_eq!((s.f1, s.precision, s.recall, s.iou, s.oa), (1.0, 1.0, 1.0, 1.0, 1.0));
        let s = counts(0, 0, 3, 7).finalize().unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.iou), (0.0, 0.0, 0.0, 0.0));
        assert!(ConfusionCounts::default().finalize().is_err());
        let all = BinaryMask::from_fn(3, 3, |r, c| (r + c) % 2 == 0);
        let s = accumulate(ConfusionCounts::default(), &all, &all).unwrap().finalize().unwrap();
        assert_eq!((s.f1, s.precision, s.recall, s.iou, s.oa), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn report_format() {
        let s = counts(2, 1, 1, 12).finalize().unwrap();
        let text = s.to_report();
        assert!(text.contains("\"precision\": 0.666667"));
        assert!(text.contains("\"iou\": 0.500000"));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 5);
    }

    fn mask(n: usize) -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(0u8..2, n * n).prop_map(move |d| BinaryMask::from_vec(n, n, d).unwrap())
    }

    fn arb_counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..1000, 0u64..1000, 0u64..1000, 0u64..1000).prop_map(|(a, b, c, d)| counts(a, b, c, d))
    }

    proptest! {
        #[test]
        fn accumulate_matches_loop(p in mask(8), g in mask(8)) {
            let c = accumulate(ConfusionCounts::default(), &p, &g).unwrap();
            prop_assert_eq!(c, loop_counts(&p, &g));
            prop_assert_eq!(c.total(), 64);
        }

        #[test]
        fn merge_is_commutative_monoid(a in arb_counts(), b in arb_counts(), c in arb_counts()) {
            prop_assert_eq!(merge(a, ConfusionCounts::default()), a);
            prop_assert_eq!(merge(a, b), merge(b, a));
            prop_assert_eq!(merge(merge(a, b), c), merge(a, merge(b, c)));
        }

        #[test]
        fn shards_equal_whole(pairs in prop::collection::vec((mask(4), mask(4)), 1..8), split in 0usize..8) {
            let split = split.min(pairs.len());
            let fold = |ps: &[(BinaryMask, BinaryMask)]| ps.iter().fold(ConfusionCounts::default(), |c, (p, g)| accumulate(c, p, g).unwrap());
            let whole = fold(&pairs);
            prop_assert_eq!(merge(fold(&pairs[..split]), fold(&pairs[split..])), whole);
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(fold(&rev).finalize().unwrap(), whole.finalize().unwrap());
        }

        #[test]
        fn score_identities(c in arb_counts()) {
            prop_assume!(c.total() > 0);
            let s = c.finalize().unwrap();
            for v in [s.f1, s.precision, s.recall, s.iou, s.oa] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if c.tp + c.fp + c.fn_ > 0 {
                prop_assert!((s.iou - s.f1 / (2.0 - s.f1)).abs() < 1e-12);
            }
            if s.precision + s.recall > 0.0 {
                prop_assert!((s.f1 - 2.0 * s.precision * s.recall / (s.precision + s.recall)).abs() < 1e-12);
                prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-12 && s.f1 <= s.precision.max(s.recall) + 1e-12);
            }
        }
    }
}
