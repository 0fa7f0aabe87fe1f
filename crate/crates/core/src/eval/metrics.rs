use crate::data::{DataError, LabelMap};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    /// Ground-truth pixels of this class.
    pub support: u64,
    pub accuracy: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    pub mean_pixel_accuracy: f64,
    pub average_class_accuracy: f64,
    pub mean_iou: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// `counts[gt * n + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), n_classes * n_classes, "confusion matrix size");
        Self { n: n_classes, counts }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(DataError::Invalid(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ))
            .into());
        }
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.n || g >= self.n {
                return Err(DataError::Invalid(format!(
                    "class id {} out of range for {} classes",
                    p.max(g),
                    self.n
                ))
                .into());
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n, "merging confusion matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// MP over all pixels; AC and IoU averaged over classes present in the
    /// ground truth.
    pub fn metrics(&self) -> SegMetrics {
        let n = self.n;
        let total: u64 = self.counts.iter().sum();
        let diag: u64 = (0..n).map(|i| self.get(i, i)).sum();
        let mut per_class = Vec::with_capacity(n);
        let (mut acc_sum, mut iou_sum, mut present) = (0.0, 0.0, 0usize);
        for i in 0..n {
            let row: u64 = (0..n).map(|j| self.get(i, j)).sum();
            let col: u64 = (0..n).map(|j| self.get(j, i)).sum();
            let tp = self.get(i, i);
            let (accuracy, iou) = if row > 0 {
                let a = tp as f64 / row as f64;
                let u = tp as f64 / (row + col - tp) as f64;
                acc_sum += a;
                iou_sum += u;
                present += 1;
                (Some(a), Some(u))
            } else {
                (None, None)
            };
            per_class.push(ClassMetrics {
                class: i,
                support: row,
                accuracy,
                iou,
            });
        }
        let mean = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
        SegMetrics {
            mean_pixel_accuracy: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
            average_class_accuracy: mean(acc_sum),
            mean_iou: mean(iou_sum),
            per_class,
        }
    }
}

pub fn seg_metrics(pred: &[LabelMap], gt: &[LabelMap], n_classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(DataError::Invalid(format!("{} predictions for {} ground-truth maps", pred.len(), gt.len())).into());
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (p, g) in pred.iter().zip(gt) {
        cm.add(p, g)?;
    }
    Ok(cm.metrics())
}
