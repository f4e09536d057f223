//! AP@0.5 with all-point interpolation and box-size summaries.

use serde::{Deserialize, Serialize};

use crate::detector::{iou, Annotation, BBox, Detection};
use crate::error::{Error, Result};
use crate::multiwarp::Model;
use crate::tensor::Tensor;

pub const IOU_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    /// Absent when the class has no truth instances.
    pub ap50: Option<f64>,
    pub truths: usize,
    pub tp: usize,
    pub fp: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over classes with at least one truth instance.
    pub ap50: f64,
    pub per_class: Vec<ClassReport>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub truths: usize,
    pub images: usize,
    pub iou_threshold: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Area under the precision envelope over all recall levels.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, &prec) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * prec;
        prev_recall = p.recall;
    }
    ap
}

/// Scores per-image detections against per-image truths.
///
/// Detections are visited in descending score; each takes the same-class truth of its image
/// with the highest IoU, counting as a true positive when that IoU exceeds 0.5 and the truth
/// is still unmatched. Everything else is a false positive.
pub fn ap50(predictions: &[Vec<Detection>], truths: &[Vec<Annotation>], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            truths.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let mut ranked: Vec<(usize, &Detection)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(img, dets)| dets.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let class_truths: Vec<Vec<&BBox>> = truths
            .iter()
            .map(|t| t.iter().filter(|a| a.class_id == class_id).map(|a| &a.bbox).collect())
            .collect();
        let total: usize = class_truths.iter().map(Vec::len).sum();
        let mut used: Vec<Vec<bool>> = class_truths.iter().map(|t| vec![false; t.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut curve = Vec::with_capacity(ranked.len());
        for (img, det) in ranked {
            let best = class_truths[img]
                .iter()
                .enumerate()
                .map(|(i, t)| (i, iou(&det.bbox, t)))
                .fold(None, |acc: Option<(usize, f32)>, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            match best {
                Some((i, v)) if v > IOU_THRESHOLD && !used[img][i] => {
                    used[img][i] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            if total > 0 {
                curve.push(PrPoint {
                    recall: tp as f64 / total as f64,
                    precision: tp as f64 / (tp + fp) as f64,
                });
            }
        }
        per_class.push(ClassReport {
            class_id,
            ap50: (total > 0).then(|| average_precision(&curve)),
            truths: total,
            tp,
            fp,
            curve,
        });
    }
    let scored: Vec<f64> = per_class.iter().filter_map(|c| c.ap50).collect();
    let truths_total: usize = per_class.iter().map(|c| c.truths).sum();
    let tp: usize = per_class.iter().map(|c| c.tp).sum();
    Ok(EvalReport {
        ap50: if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        },
        tp,
        fp: per_class.iter().map(|c| c.fp).sum(),
        fn_: truths_total - tp,
        truths: truths_total,
        images: truths.len(),
        iou_threshold: IOU_THRESHOLD,
        per_class,
        config: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Detections below this score are not ranked.
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            batch_size: 16,
        }
    }
}

/// Runs `model` over `images` in batches.
pub fn predict(model: &Model, images: &Tensor<f32>, options: &EvalOptions) -> Result<Vec<Vec<Detection>>> {
    let n = images.batch();
    let mut out = Vec::with_capacity(n);
    let step = options.batch_size.max(1);
    for start in (0..n).step_by(step) {
        let idx: Vec<usize> = (start..(start + step).min(n)).collect();
        out.extend(model.detect(&images.select(&idx), options.score_threshold, options.nms_iou)?);
    }
    Ok(out)
}

/// AP@0.5 of `model` on labeled images.
pub fn evaluate_model(
    model: &Model,
    images: &Tensor<f32>,
    truths: &[Vec<Annotation>],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let preds = predict(model, images, options)?;
    ap50(&preds, truths, model.config.num_classes)
}

/// Summary of box extents, e.g. to compare domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub mean_area: f64,
    pub mean_width: f64,
    pub mean_height: f64,
    /// Upper bin edges for the histograms; the last bin is open.
    pub edges: Vec<f64>,
    pub height_histogram: Vec<usize>,
    pub width_histogram: Vec<usize>,
}

pub fn histogram(values: impl IntoIterator<Item = f64>, edges: &[f64]) -> Vec<usize> {
    let mut bins = vec![0; edges.len() + 1];
    for v in values {
        bins[edges.partition_point(|&e| e <= v)] += 1;
    }
    bins
}

pub fn box_stats<'a>(boxes: impl IntoIterator<Item = &'a BBox>, edges: &[f64]) -> BoxStats {
    let boxes: Vec<&BBox> = boxes.into_iter().collect();
    let n = boxes.len();
    let mean = |f: &dyn Fn(&BBox) -> f32| {
        if n == 0 {
            0.0
        } else {
            boxes.iter().map(|b| f(b) as f64).sum::<f64>() / n as f64
        }
    };
    BoxStats {
        count: n,
        mean_area: mean(&|b| b.area()),
        mean_width: mean(&|b| b.width()),
        mean_height: mean(&|b| b.height()),
        edges: edges.to_vec(),
        height_histogram: histogram(boxes.iter().map(|b| b.height() as f64), edges),
        width_histogram: histogram(boxes.iter().map(|b| b.width() as f64), edges),
    }
}
