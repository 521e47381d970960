use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelRaster, IGNORE, N_CLASSES};

const ABSTAIN: usize = N_CLASSES;

/// Rows are true classes, columns predicted classes plus a trailing abstain
/// column for ignore predictions on labeled pixels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES + 1]; N_CLASSES],
}

impl ConfusionMatrix {
    #[inline]
    pub fn record(&mut self, truth: u8, pred: u8) -> Result<()> {
        if truth == IGNORE {
            return Ok(());
        }
        if truth as usize >= N_CLASSES {
            return Err(Error::InvalidLabel(truth));
        }
        let col = if pred == IGNORE {
            ABSTAIN
        } else if (pred as usize) < N_CLASSES {
            pred as usize
        } else {
            return Err(Error::InvalidLabel(pred));
        };
        self.counts[truth as usize][col] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn total(&self) -> u64 {
        (0..N_CLASSES).map(|c| self.support(c)).sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..N_CLASSES)
            .filter(|&t| t != class)
            .map(|t| self.counts[t][class])
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.support(class) - self.true_positives(class)
    }

    /// One-vs-rest true negatives.
    pub fn true_negatives(&self, class: usize) -> u64 {
        self.total()
            - self.true_positives(class)
            - self.false_positives(class)
            - self.false_negatives(class)
    }

    fn fractions(&self, class: usize) -> [(u64, u64); 4] {
        let tp = self.true_positives(class);
        let fp = self.false_positives(class);
        let fneg = self.false_negatives(class);
        [
            (tp, tp + fp),
            (tp, tp + fneg),
            (2 * tp, 2 * tp + fp + fneg),
            (tp, tp + fp + fneg),
        ]
    }

    pub fn accuracy(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::EmptySupport);
        }
        let trace: u64 = (0..N_CLASSES).map(|c| self.true_positives(c)).sum();
        Ok(trace as f64 / n as f64)
    }

    /// Support-weighted mean of one per-class ratio. Each class term is
    /// `support * num / den` on exact integers, so weighted recall reduces to
    /// the trace and equals accuracy bit for bit.
    fn weighted(&self, which: usize) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::EmptySupport);
        }
        let mut acc = 0.0;
        for c in 0..N_CLASSES {
            let s = self.support(c);
            if s == 0 {
                continue;
            }
            let (num, den) = self.fractions(c)[which];
            if den > 0 {
                acc += (s as f64 * num as f64) / den as f64;
            }
        }
        Ok(acc / n as f64)
    }

    pub fn precision_w(&self) -> Result<f64> {
        self.weighted(0)
    }

    pub fn recall_w(&self) -> Result<f64> {
        self.weighted(1)
    }

    pub fn f1_w(&self) -> Result<f64> {
        self.weighted(2)
    }

    pub fn iou_w(&self) -> Result<f64> {
        self.weighted(3)
    }

    /// Per-class precision, recall, F1 and IoU; undefined ratios are 0.
    pub fn class_metrics(&self, class: usize) -> ClassMetrics {
        let ratio = |(num, den): (u64, u64)| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let [p, r, f, i] = self.fractions(class);
        ClassMetrics {
            class: class as u8,
            precision: ratio(p),
            recall: ratio(r),
            f1: ratio(f),
            iou: ratio(i),
            support: self.support(class),
        }
    }

    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport {
            weighted: WeightedMetrics {
                accuracy: self.accuracy()?,
                precision: self.precision_w()?,
                recall: self.recall_w()?,
                f1: self.f1_w()?,
                iou: self.iou_w()?,
            },
            per_class: (0..N_CLASSES).map(|c| self.class_metrics(c)).collect(),
            n_samples: self.total(),
        })
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch {
            left: format!("{} truths", y_true.len()),
            right: format!("{} predictions", y_pred.len()),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

pub fn confusion_rasters(truth: &LabelRaster, pred: &LabelRaster) -> Result<ConfusionMatrix> {
    if truth.dims() != pred.dims() {
        return Err(Error::ShapeMismatch {
            left: format!("truth {:?}", truth.dims()),
            right: format!("prediction {:?}", pred.dims()),
        });
    }
    confusion(truth.values.as_slice(), pred.values.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted: WeightedMetrics,
    pub per_class: Vec<ClassMetrics>,
    pub n_samples: u64,
}
