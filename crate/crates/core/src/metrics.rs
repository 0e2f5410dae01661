//! Segmentation and calibration metrics.

use crate::model::{argmax, ProbTensor};
use crate::{Error, Result};

pub const ECE_BINS: usize = 10;

/// K x K confusion counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        Confusion {
            classes: k,
            counts: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// (TP, FP, FN) of class `c`.
    pub fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let k = self.classes;
        let tp = self.counts[c * k + c];
        let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
        let truth: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
        (tp, pred - tp, truth - tp)
    }

    /// Per-class IoU; `None` for classes absent from both truth and
    /// prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_) = self.tp_fp_fn(c);
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_present(&self.class_iou())
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        trace as f64 / total as f64
    }

    /// Macro F1 over the classes that take part in the mIoU mean.
    pub fn macro_f1(&self) -> f64 {
        let f1: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_) = self.tp_fp_fn(c);
                let denom = 2 * tp + fp + fn_;
                (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
            })
            .collect();
        mean_present(&f1)
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Equal-width confidence histogram over the max-class probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub count: [u64; ECE_BINS],
    pub conf_sum: [f64; ECE_BINS],
    pub correct: [u64; ECE_BINS],
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            count: [0; ECE_BINS],
            conf_sum: [0.0; ECE_BINS],
            correct: [0; ECE_BINS],
        }
    }
}

impl Calibration {
    pub fn add(&mut self, confidence: f64, correct: bool) {
        let b = ((confidence * ECE_BINS as f64).floor() as usize).min(ECE_BINS - 1);
        self.count[b] += 1;
        self.conf_sum[b] += confidence;
        self.correct[b] += correct as u64;
    }

    pub fn merge(&mut self, other: &Calibration) {
        for b in 0..ECE_BINS {
            self.count[b] += other.count[b];
            self.conf_sum[b] += other.conf_sum[b];
            self.correct[b] += other.correct[b];
        }
    }

    pub fn ece(&self) -> f64 {
        let n: u64 = self.count.iter().sum();
        if n == 0 {
            return 0.0;
        }
        (0..ECE_BINS)
            .filter(|&b| self.count[b] > 0)
            .map(|b| {
                let nb = self.count[b] as f64;
                let acc = self.correct[b] as f64 / nb;
                let conf = self.conf_sum[b] / nb;
                nb / n as f64 * (acc - conf).abs()
            })
            .sum()
    }
}

/// Accumulated evaluation state for one model over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: Confusion,
    pub calibration: Calibration,
}

impl Evaluation {
    pub fn new(classes: usize) -> Self {
        Evaluation {
            confusion: Confusion::new(classes),
            calibration: Calibration::default(),
        }
    }

    /// Adds one predicted image against its ground-truth labels.
    pub fn add_image(&mut self, probs: &ProbTensor, truth: &[u8]) -> Result<()> {
        if probs.pixels() != truth.len() || probs.classes != self.confusion.classes {
            return Err(Error::Shape(format!(
                "prediction has {} pixels x {} classes, labels {} pixels x {} classes",
                probs.pixels(),
                probs.classes,
                truth.len(),
                self.confusion.classes
            )));
        }
        for (i, &y) in truth.iter().enumerate() {
            let q = probs.pixel(i);
            let pred = argmax(q);
            self.confusion.add(y as usize, pred);
            self.calibration.add(q[pred], pred == y as usize);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Evaluation) {
        self.confusion.merge(&other.confusion);
        self.calibration.merge(&other.calibration);
    }

    pub fn summary(&self) -> Summary {
        Summary {
            miou: self.confusion.miou(),
            accuracy: self.confusion.accuracy(),
            f1: self.confusion.macro_f1(),
            ece: self.calibration.ece(),
            class_iou: self
                .confusion
                .class_iou()
                .into_iter()
                .map(|v| v.unwrap_or(0.0))
                .collect(),
        }
    }
}

/// Scalar metrics; `class_iou` reports 0 for classes excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub miou: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub ece: f64,
    pub class_iou: Vec<f64>,
}

/// Area under a piecewise-linear curve divided by its x extent, so a
/// constant curve scores its constant. A single point scores its y value.
pub fn normalized_auc(points: &[(f64, f64)]) -> f64 {
    match points {
        [] => 0.0,
        [(_, y)] => *y,
        _ => {
            let span = points[points.len() - 1].0 - points[0].0;
            if span <= 0.0 {
                return points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
            }
            let area: f64 = points
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum();
            area / span
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_confusion() {
        let c = Confusion::from_rows(&[vec![3, 1], vec![2, 4]]);
        let iou = c.class_iou();
        assert_abs_diff_eq!(iou[0].unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(iou[1].unwrap(), 4.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.miou(), (0.5 + 4.0 / 7.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.accuracy(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn absent_class_excluded() {
        let c = Confusion::from_rows(&[vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 0]]);
        assert_eq!(c.class_iou()[2], None);
        assert_eq!(c.miou(), 1.0);
        assert_eq!(c.macro_f1(), 1.0);
    }

    #[test]
    fn uniform_prediction_single_bin() {
        let probs = ProbTensor {
            classes: 4,
            rows: 1,
            cols: 4,
            data: vec![0.25; 16],
        };
        let mut e = Evaluation::new(4);
        e.add_image(&probs, &[0, 0, 1, 2]).unwrap();
        // argmax of a uniform vector is class 0: accuracy 1/2
        assert_abs_diff_eq!(e.summary().ece, (0.5f64 - 0.25).abs(), epsilon = 1e-12);
    }

    #[test]
    fn auc_of_constant() {
        assert_abs_diff_eq!(normalized_auc(&[(0.0, 0.4), (3.0, 0.4), (10.0, 0.4)]), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(normalized_auc(&[(0.0, 0.0), (2.0, 1.0)]), 0.5, epsilon = 1e-12);
    }
}
