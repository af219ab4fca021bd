//! Confusion-matrix segmentation metrics.
//!
//! With `n[i][j]` the number of pixels of true class `i` predicted as `j`:
//!
//! * pixel accuracy = Σᵢ nᵢᵢ / Σᵢⱼ nᵢⱼ
//! * mean accuracy  = mean over classes of nᵢᵢ / Σⱼ nᵢⱼ
//! * mean IoU       = mean over classes of nᵢᵢ / (Σⱼ nᵢⱼ + Σⱼ nⱼᵢ − nᵢᵢ)
//! * FW IoU         = Σᵢ (Σⱼ nᵢⱼ) · IoUᵢ / Σᵢⱼ nᵢⱼ
//!
//! and, for two classes with class 1 as foreground, precision
//! n₁₁ / (n₁₁ + n₀₁), recall n₁₁ / (n₁₁ + n₁₀) and F1.
//!
//! Classes whose denominator is zero are left out of the means.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for a {classes}x{classes} confusion matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Pixels of true class `i` predicted as `j`.
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.classes + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/truth pair. Pixels whose truth is the ignore label
    /// are skipped.
    pub fn accumulate(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (predicted.height(), predicted.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                predicted.height(),
                predicted.width(),
                truth.height(),
                truth.width()
            )));
        }
        let c = self.classes;
        let pairs: Vec<(usize, usize)> = truth
            .labels()
            .iter()
            .zip(predicted.labels())
            .filter(|(&t, _)| !truth.is_ignored(t))
            .map(|(&t, &p)| (t, p))
            .collect();
        if let Some(&(t, p)) = pairs.iter().find(|(t, p)| *t >= c || *p >= c) {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: c,
            });
        }
        for (t, p) in pairs {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for combining matrices built in parallel.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn compute_all(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyMatrix);
        }
        let c = self.classes;
        let mut diag = 0u64;
        let mut acc_sum = 0.0;
        let mut acc_n = 0usize;
        let mut iou_sum = 0.0;
        let mut iou_n = 0usize;
        let mut fw = 0.0;
        for i in 0..c {
            let nii = self.get(i, i);
            let row = self.row_sum(i);
            let union = row + self.col_sum(i) - nii;
            diag += nii;
            if row > 0 {
                acc_sum += nii as f64 / row as f64;
                acc_n += 1;
            }
            if union > 0 {
                let iou = nii as f64 / union as f64;
                iou_sum += iou;
                iou_n += 1;
                fw += row as f64 * iou;
            }
        }
        let binary = (c == 2).then(|| {
            let (n11, n01, n10) = (
                self.get(1, 1) as f64,
                self.get(0, 1) as f64,
                self.get(1, 0) as f64,
            );
            BinaryMetrics {
                precision: ratio(n11, n11 + n01),
                recall: ratio(n11, n11 + n10),
                f1: ratio(2.0 * n11, 2.0 * n11 + n01 + n10),
            }
        });
        Ok(Metrics {
            pixel_accuracy: diag as f64 / total as f64,
            mean_accuracy: acc_sum / acc_n as f64,
            mean_iou: iou_sum / iou_n as f64,
            fw_iou: fw / total as f64,
            binary,
        })
    }

    /// Rows are true classes, columns predictions.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for j in 0..self.classes {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for i in 0..self.classes {
            let _ = write!(s, "{i}");
            for j in 0..self.classes {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Zero over zero counts as zero (no foreground predicted or present).
fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
    pub fw_iou: f64,
    /// Present only for two-class problems.
    pub binary: Option<BinaryMetrics>,
}

impl Metrics {
    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let mut rows = Vec::new();
        if let Some(b) = self.binary {
            rows.push(("precision", b.precision));
            rows.push(("recall", b.recall));
            rows.push(("f1", b.f1));
        }
        rows.extend([
            ("pixel_accuracy", self.pixel_accuracy),
            ("mean_accuracy", self.mean_accuracy),
            ("fw_iou", self.fw_iou),
            ("mean_iou", self.mean_iou),
        ]);
        let mut s = String::new();
        for (name, v) in rows {
            let _ = writeln!(s, "{name:<16}{v:>8.4}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[usize]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec(), Some(255)).unwrap()
    }

    fn worked_example() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(2, vec![88, 2, 2, 8]).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let l = labels(&[0, 1, 2, 2, 1]);
        cm.accumulate(&l, &l).unwrap();
        assert_eq!(cm.total(), 5);
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2)), (1, 2, 2));
    }

    #[test]
    fn ignored_truth_is_skipped() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(&[0, 1]), &labels(&[255, 255]))
            .unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn hand_counted_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(&[0, 1, 1, 1]), &labels(&[0, 0, 1, 1]))
            .unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.get(1, 0), 0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&labels(&[2]), &labels(&[0])).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn perfect_two_class_scores_one() {
        let m = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 3])
            .unwrap()
            .compute_all()
            .unwrap();
        let b = m.binary.unwrap();
        for v in [
            m.pixel_accuracy,
            m.mean_accuracy,
            m.mean_iou,
            m.fw_iou,
            b.precision,
            b.recall,
            b.f1,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn worked_two_class_example() {
        let m = worked_example().compute_all().unwrap();
        let b = m.binary.unwrap();
        assert_eq!(b.precision, 0.8);
        assert_eq!(b.recall, 0.8);
        assert_eq!(b.f1, 0.8);
        assert_eq!(m.pixel_accuracy, 0.96);
        assert!((m.mean_iou - 0.5 * (88.0 / 92.0 + 8.0 / 12.0)).abs() < 1e-15);
        assert!((m.mean_iou - 0.8116).abs() < 1e-4);
    }

    #[test]
    fn absent_classes_dropped_from_means() {
        // class 2 never appears in truth or prediction
        let m = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 4, 0, 0, 0, 0])
            .unwrap()
            .compute_all()
            .unwrap();
        assert_eq!(m.mean_iou, 1.0);
        assert_eq!(m.mean_accuracy, 1.0);
        assert!(m.binary.is_none());
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(
            ConfusionMatrix::new(2).compute_all(),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            worked_example().to_csv(),
            "truth\\pred,0,1\n0,88,2\n1,2,8\n"
        );
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = worked_example();
        a.merge(&worked_example()).unwrap();
        assert_eq!(a.total(), 200);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }
}
