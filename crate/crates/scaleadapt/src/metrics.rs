//! Segmentation evaluation: confusion matrix, per-class IoU, mIoU and the
//! gap against an oracle run.

use serde::{Deserialize, Serialize};

use crate::types::{Dataset, Prediction, SegMask, Tile, IGNORE};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("prediction {ph}x{pw} does not match mask {mh}x{mw}")]
    ShapeMismatch { ph: usize, pw: usize, mh: usize, mw: usize },
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(u8, usize),
    #[error("every class is undefined (no scored pixels)")]
    AllUndefined,
    #[error("reports cover different class sets ({0} vs {1} classes)")]
    ClassSetMismatch(usize, usize),
    #[error("dataset has no masks")]
    NoMasks,
    #[error("dataset is empty")]
    EmptyDataset,
}

/// K x K pixel counts, rows indexed by truth and columns by prediction.
/// IGNORE pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    #[inline]
    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merge a partial matrix; accumulation is associative over disjoint
    /// pixel sets.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Accumulate one prediction/mask pair. The prediction is reduced per pixel
/// by argmax with ties broken toward the lowest class index.
pub fn accumulate(
    cm: &mut ConfusionMatrix,
    pred: &Prediction,
    truth: &SegMask,
) -> Result<(), MetricError> {
    if (pred.probs.height, pred.probs.width) != (truth.height, truth.width) {
        return Err(MetricError::ShapeMismatch {
            ph: pred.probs.height,
            pw: pred.probs.width,
            mh: truth.height,
            mw: truth.width,
        });
    }
    let bad = truth.invalid_labels();
    if let Some(&l) = bad.first() {
        return Err(MetricError::LabelOutOfRange(l, cm.num_classes));
    }
    if truth.num_classes != cm.num_classes || pred.num_classes() != cm.num_classes {
        return Err(MetricError::ClassSetMismatch(truth.num_classes, cm.num_classes));
    }
    let hat = pred.argmax_mask();
    for (p, &t) in truth.labels.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        cm.counts[t as usize * cm.num_classes + hat.labels[p] as usize] += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// IoU per class; `None` marks a class absent from both truth and
    /// prediction (excluded from the mean).
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou_gap: Option<f64>,
}

impl EvalReport {
    /// mIoU as a percentage rounded to two decimals, the rendering used in
    /// result tables.
    pub fn miou_pct(&self) -> f64 {
        (self.miou * 10000.0).round() / 100.0
    }
}

/// Per-class IoU and mIoU from a confusion matrix.
pub fn iou(cm: &ConfusionMatrix) -> Result<EvalReport, MetricError> {
    let k = cm.num_classes;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..k {
        let tp = cm.at(c, c);
        let row: u64 = (0..k).map(|p| cm.at(c, p)).sum();
        let col: u64 = (0..k).map(|t| cm.at(t, c)).sum();
        let denom = row + col - tp;
        if denom == 0 {
            per_class.push(None);
        } else {
            let v = tp as f64 / denom as f64;
            per_class.push(Some(v));
            sum += v;
            defined += 1;
        }
    }
    if defined == 0 {
        return Err(MetricError::AllUndefined);
    }
    Ok(EvalReport { per_class_iou: per_class, miou: sum / defined as f64, oracle_miou: None, iou_gap: None })
}

/// Attach the oracle comparison: gap = oracle mIoU - model mIoU.
pub fn iou_gap(report: &EvalReport, oracle: &EvalReport) -> Result<EvalReport, MetricError> {
    if report.per_class_iou.len() != oracle.per_class_iou.len() {
        return Err(MetricError::ClassSetMismatch(
            report.per_class_iou.len(),
            oracle.per_class_iou.len(),
        ));
    }
    let mut out = report.clone();
    out.oracle_miou = Some(oracle.miou);
    out.iou_gap = Some(oracle.miou - report.miou);
    Ok(out)
}

/// Evaluate a predictor over a labeled dataset at native tile resolution.
pub fn evaluate_with<P>(mut predict: P, dataset: &Dataset) -> Result<EvalReport, MetricError>
where
    P: FnMut(&Tile) -> Prediction,
{
    let masks = dataset.masks.as_ref().ok_or(MetricError::NoMasks)?;
    if dataset.tiles.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let k = masks[0].num_classes;
    let mut cm = ConfusionMatrix::new(k);
    for (tile, mask) in dataset.tiles.iter().zip(masks) {
        let pred = predict(tile);
        accumulate(&mut cm, &pred, mask)?;
    }
    iou(&cm)
}
