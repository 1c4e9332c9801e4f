//! Segmentation metrics: confusion matrix, per-class IoU, mIoU, mAcc.

use serde::{Deserialize, Serialize};

use crate::data::{VoxelizedScene, IGNORE_LABEL};
use crate::models::{CoordinatePlan, Res16UNet};
use crate::scalar::Scalar;

use super::TrainError;

/// The 20 ScanNet benchmark classes, in the conventional order (including
/// the benchmark's historical spellings).
pub const SCANNET20_CLASSES: [&str; 20] = [
    "bathtub",
    "bed",
    "bookshelf",
    "cabinet",
    "chair",
    "counter",
    "curtain",
    "desk",
    "door",
    "floor",
    "otherfurniture",
    "picture",
    "refridgerator",
    "shower_curtain",
    "sink",
    "sofa",
    "table",
    "toilet",
    "wall",
    "window",
];

/// Display names for a label set: the ScanNet-20 names when the class count
/// matches, `class_{i}` otherwise.
pub fn class_names(num_classes: usize) -> Vec<String> {
    if num_classes == SCANNET20_CLASSES.len() {
        SCANNET20_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|i| format!("class_{i}")).collect()
    }
}

/// Square count matrix with ground truth on rows, predictions on columns.
/// Ignored points are never recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major counts, `counts[gt * num_classes + pred]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn record(&mut self, gt: u32, pred: u32) {
        if gt == IGNORE_LABEL {
            return;
        }
        let (gt, pred) = (gt as usize, pred as usize);
        assert!(
            gt < self.num_classes && pred < self.num_classes,
            "label out of range: gt {gt}, pred {pred}, classes {}",
            self.num_classes
        );
        self.counts[gt * self.num_classes + pred] += 1;
    }

    pub fn record_batch(&mut self, gt: &[u32], pred: &[u32]) {
        assert_eq!(gt.len(), pred.len(), "prediction count mismatch");
        for (&g, &p) in gt.iter().zip(pred) {
            self.record(g, p);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Total recorded (non-ignored) points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Intersection over union for one class: `TP / (TP + FP + FN)`.
    /// `None` when the class never appears in ground truth or predictions,
    /// so absent classes cannot drag the mean.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let row: u64 = (0..self.num_classes).map(|p| self.count(class, p)).sum();
        let col: u64 = (0..self.num_classes).map(|g| self.count(g, class)).sum();
        let denom = row + col - tp; // TP + FN + FP
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// Mean per-class recall, averaged over classes that appear in the
    /// ground truth.
    pub fn macc(&self) -> f64 {
        let mut sum = 0.0;
        let mut present = 0usize;
        for gt in 0..self.num_classes {
            let row: u64 = (0..self.num_classes).map(|p| self.count(gt, p)).sum();
            if row > 0 {
                sum += self.count(gt, gt) as f64 / row as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }

    /// Overall accuracy: fraction of recorded points on the diagonal.
    pub fn oacc(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        diag as f64 / total as f64
    }
}

/// Aggregate evaluation over a validation split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub miou: f64,
    pub macc: f64,
    pub oacc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Row-wise argmax over logits. Ties resolve to the lowest class index.
pub fn predict_labels<F: Scalar>(logits: &ndarray::Array2<F>) -> Vec<u32> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Runs the network in eval mode over every scene and accumulates one
/// confusion matrix.
pub fn evaluate<F: Scalar>(
    net: &mut Res16UNet<F>,
    scenes: &[VoxelizedScene<F>],
) -> Result<EvalResult, TrainError> {
    let num_classes = net.spec().num_classes;
    let mut confusion = ConfusionMatrix::new(num_classes);
    for scene in scenes {
        let plan = CoordinatePlan::build(scene.sparse.cmap.clone())?;
        let out = net.forward_tapped(&scene.sparse, &plan, false)?;
        let pred = predict_labels(&out.logits.features);
        confusion.record_batch(&scene.labels, &pred);
    }
    Ok(EvalResult {
        miou: confusion.miou(),
        macc: confusion.macc(),
        oacc: confusion.oacc(),
        per_class_iou: confusion.per_class_iou(),
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustc_hash::FxHashSet;

    #[test]
    fn hand_example_two_classes() {
        // Rows are ground truth: [[3, 1], [1, 3]].
        let mut cm = ConfusionMatrix::new(2);
        cm.record_batch(&[0, 0, 0, 0, 1, 1, 1, 1], &[0, 0, 0, 1, 1, 1, 1, 0]);
        assert_eq!(cm.count(0, 0), 3);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.count(1, 1), 3);
        // Each class: TP=3, FP=1, FN=1 → IoU = 3/5.
        assert_eq!(cm.iou(0), Some(0.6));
        assert_eq!(cm.iou(1), Some(0.6));
        assert!((cm.miou() - 0.6).abs() < 1e-15);
        // Recall 3/4 per class.
        assert!((cm.macc() - 0.75).abs() < 1e-15);
        assert!((cm.oacc() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let mut cm = ConfusionMatrix::new(3);
        cm.record_batch(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.macc(), 1.0);
        assert_eq!(cm.oacc(), 1.0);
    }

    #[test]
    fn absent_classes_are_excluded_not_zeroed() {
        let mut cm = ConfusionMatrix::new(3);
        // Class 2 never appears in gt or predictions.
        cm.record_batch(&[0, 0, 1], &[0, 1, 1]);
        assert_eq!(cm.iou(2), None);
        assert_eq!(cm.per_class_iou().len(), 3);
        // IoU(0) = 1/2, IoU(1) = 1/2; mean over defined = 0.5, not 1/3 of sum.
        assert!((cm.miou() - 0.5).abs() < 1e-15);
        // mAcc over classes present in gt only: (1/2 + 1) / 2.
        assert!((cm.macc() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn predicted_only_class_has_zero_iou_not_none() {
        let mut cm = ConfusionMatrix::new(2);
        // Class 1 appears only as a (wrong) prediction: FP > 0 so IoU = 0.
        cm.record_batch(&[0, 0], &[0, 1]);
        assert_eq!(cm.iou(1), Some(0.0));
        // But it is absent from gt, so mAcc ignores it.
        assert!((cm.macc() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ignored_points_are_not_recorded() {
        let mut cm = ConfusionMatrix::new(2);
        cm.record_batch(&[0, IGNORE_LABEL, 1], &[0, 1, 1]);
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.miou(), 1.0);
    }

    #[test]
    fn merge_equals_recording_everything_in_one_matrix() {
        let gt = [0u32, 1, 2, 1, 0, 2, 2, 1];
        let pred = [0u32, 1, 1, 1, 2, 2, 0, 0];
        let mut whole = ConfusionMatrix::new(3);
        whole.record_batch(&gt, &pred);
        let mut a = ConfusionMatrix::new(3);
        let mut b = ConfusionMatrix::new(3);
        a.record_batch(&gt[..4], &pred[..4]);
        b.record_batch(&gt[4..], &pred[4..]);
        a.merge(&b);
        assert_eq!(a, whole);
        assert_eq!(a.total(), 8);
    }

    /// Brute-force set oracle: compute IoU from explicit index sets.
    #[test]
    fn iou_matches_set_definition() {
        let gt = [0u32, 1, 2, 1, 0, 2, 2, 1, 0, 0, 1, 2];
        let pred = [0u32, 1, 1, 1, 2, 2, 0, 0, 0, 1, 1, 2];
        let mut cm = ConfusionMatrix::new(3);
        cm.record_batch(&gt, &pred);
        for class in 0..3u32 {
            let gt_set: FxHashSet<usize> =
                gt.iter().enumerate().filter(|(_, &g)| g == class).map(|(i, _)| i).collect();
            let pred_set: FxHashSet<usize> =
                pred.iter().enumerate().filter(|(_, &p)| p == class).map(|(i, _)| i).collect();
            let inter = gt_set.intersection(&pred_set).count();
            let union = gt_set.union(&pred_set).count();
            let expected = if union == 0 { None } else { Some(inter as f64 / union as f64) };
            assert_eq!(cm.iou(class as usize), expected, "class {class}");
        }
    }

    #[test]
    fn recording_order_does_not_matter() {
        let gt = [2u32, 0, 1, 1, 2, 0];
        let pred = [2u32, 1, 1, 0, 2, 0];
        let mut forward = ConfusionMatrix::new(3);
        forward.record_batch(&gt, &pred);
        let mut reverse = ConfusionMatrix::new(3);
        for i in (0..gt.len()).rev() {
            reverse.record(gt[i], pred[i]);
        }
        assert_eq!(forward, reverse);
    }

    #[test]
    fn scannet_names_are_the_benchmark_twenty() {
        assert_eq!(SCANNET20_CLASSES.len(), 20);
        assert_eq!(SCANNET20_CLASSES[0], "bathtub");
        assert_eq!(SCANNET20_CLASSES[12], "refridgerator");
        assert_eq!(SCANNET20_CLASSES[13], "shower_curtain");
        assert_eq!(SCANNET20_CLASSES[19], "window");
        let names = class_names(20);
        assert_eq!(names[9], "floor");
        let generic = class_names(6);
        assert_eq!(generic[5], "class_5");
    }

    #[test]
    fn argmax_ties_resolve_to_lowest_index() {
        let logits = ndarray::array![[1.0f64, 1.0, 0.5], [0.1, 0.3, 0.3]];
        assert_eq!(predict_labels(&logits), vec![0, 1]);
    }

    #[test]
    fn empty_matrix_scores_zero() {
        let cm = ConfusionMatrix::new(4);
        assert_eq!(cm.miou(), 0.0);
        assert_eq!(cm.macc(), 0.0);
        assert_eq!(cm.total(), 0);
        assert!(cm.per_class_iou().iter().all(|x| x.is_none()));
    }
}
