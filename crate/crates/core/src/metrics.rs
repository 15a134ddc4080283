//! Pixel-level binary segmentation metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel confusion counts for the positive (building) class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Thresholds `pred` at `threshold` (values `>=` it are positive) and
    /// compares against `target`, where any value above 0.5 is positive.
    pub fn from_predictions(pred: &Tensor, target: &Tensor, threshold: f32) -> Result<Self> {
        if pred.shape() != target.shape() {
            return Err(Error::shape(
                "confusion",
                format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
            ));
        }
        let mut c = Confusion::default();
        for (&p, &y) in pred.data().iter().zip(target.data()) {
            match (p >= threshold, y > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        Metrics {
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
            iou: ratio(self.tp, self.tp + self.fn_ + self.fp),
            f1: ratio(2 * self.tp, 2 * self.tp + self.fn_ + self.fp),
        }
    }
}

/// Precision, recall, IoU and F1. A value is `None` when its denominator is
/// zero (for example precision when nothing was predicted positive).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    fn cells(&self) -> [String; 4] {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        [f(self.precision), f(self.recall), f(self.iou), f(self.f1)]
    }

    /// Two-line table in P, R, IoU, F1 order.
    pub fn table(&self) -> String {
        let c = self.cells();
        format!(
            "{:<7}{:<7}{:<7}{:<7}\n{:<7}{:<7}{:<7}{:<7}\n",
            "P", "R", "IoU", "F1", c[0], c[1], c[2], c[3]
        )
    }

    /// `NaN` for undefined values; used for logging.
    pub fn as_array(&self) -> [f64; 4] {
        [self.precision, self.recall, self.iou, self.f1].map(|v| v.unwrap_or(f64::NAN))
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.cells();
        write!(f, "P {} R {} IoU {} F1 {}", c[0], c[1], c[2], c[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let c = Confusion {
            tp: 80,
            fp: 20,
            fn_: 10,
            tn: 0,
        };
        let m = c.metrics();
        assert!((m.precision.unwrap() - 0.800).abs() < 5e-4);
        assert!((m.recall.unwrap() - 0.889).abs() < 5e-4);
        assert!((m.iou.unwrap() - 0.727).abs() < 5e-4);
        assert!((m.f1.unwrap() - 0.842).abs() < 5e-4);
        assert_eq!(m.to_string(), "P 0.800 R 0.889 IoU 0.727 F1 0.842");
    }

    #[test]
    fn no_positives_anywhere_is_undefined_not_nan() {
        let p = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let m = Confusion::from_predictions(&p, &p, 0.5).unwrap().metrics();
        assert_eq!(m, Metrics::default());
        assert_eq!(m.to_string(), "P n/a R n/a IoU n/a F1 n/a");
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Tensor::from_values(&[2], vec![0.5, 0.49]).unwrap();
        let y = Tensor::from_values(&[2], vec![1.0, 1.0]).unwrap();
        let c = Confusion::from_predictions(&p, &y, 0.5).unwrap();
        assert_eq!((c.tp, c.fn_), (1, 1));
    }
}
