//! Single-stage detector: convolutional backbone, per-cell classification and
//! box regression head, detection loss, decoding and non-maximum suppression.
//!
//! Head output channels are `[background, class_0 .. class_{K-1}, dx, dy, log_w, log_h]`
//! per feature cell. Box offsets are expressed in units of the feature stride
//! relative to the cell center.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, Sequential};
use crate::tensor::{Real, Tensor};

/// Axis-aligned box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub const fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    pub fn clip(&self, width: f32, height: f32) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn flip_horizontal(&self, width: f32) -> Self {
        Self {
            x_min: width - self.x_max,
            x_max: width - self.x_min,
            ..*self
        }
    }

    fn sort_key(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A labeled object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

impl Detection {
    pub fn to_annotation(&self) -> Annotation {
        Annotation {
            bbox: self.bbox,
            class_id: self.class_id,
        }
    }
}

/// Descending score, then box coordinates, then class.
fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            a.bbox
                .sort_key()
                .iter()
                .zip(b.bbox.sort_key())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy class-wise non-maximum suppression.
///
/// A candidate is dropped when it overlaps an already kept box of the same class
/// with IoU above `iou_threshold`. Output is sorted by descending score.
pub fn nms(candidates: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(detection_order);
    let mut keep: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Keeps candidates scoring at least `tau`, then applies [`nms`].
pub fn filter_and_suppress(candidates: &[Detection], tau: f32, iou_threshold: f32) -> Vec<Detection> {
    let above: Vec<Detection> = candidates.iter().filter(|d| d.score >= tau).copied().collect();
    nms(&above, iou_threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel widths of the blocks before the last one.
    pub widths: Vec<usize>,
    /// Channels `C` of the extracted feature map.
    pub out_channels: usize,
    /// Total output stride, a power of two.
    pub stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32],
            out_channels: 32,
            stride: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels < 8 {
            return Err(Error::Config(format!(
                "backbone output channels must be at least 8, got {}",
                self.out_channels
            )));
        }
        if !self.stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "backbone stride must be a power of two, got {}",
                self.stride
            )));
        }
        let downsamples = self.stride.trailing_zeros() as usize;
        if downsamples > self.widths.len() + 1 {
            return Err(Error::Config(format!(
                "{} blocks cannot reach stride {}",
                self.widths.len() + 1,
                self.stride
            )));
        }
        Ok(())
    }

    /// Builds `conv 3x3 -> batch norm -> ReLU` blocks; the first `log2(stride)` blocks downsample.
    pub fn build<T: Real>(&self, rng: &mut impl Rng) -> Sequential<T> {
        let downsamples = self.stride.trailing_zeros() as usize;
        let mut layers = Vec::new();
        let mut in_c = 3;
        let outs = self.widths.iter().copied().chain([self.out_channels]);
        for (i, out_c) in outs.enumerate() {
            let stride = if i < downsamples { 2 } else { 1 };
            Sequential::conv_block(&mut layers, in_c, out_c, 3, stride, rng);
            in_c = out_c;
        }
        Sequential::new(layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub head_channels: usize,
    pub reg_weight: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 3,
            head_channels: 32,
            reg_weight: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 || self.head_channels == 0 {
            return Err(Error::Config("detector needs at least one class and head channel".into()));
        }
        Ok(())
    }

    pub fn head_outputs(&self) -> usize {
        self.num_classes + 1 + 4
    }

    /// `conv 3x3 -> ReLU -> conv 1x1` producing class logits and box offsets.
    pub fn build_head<T: Real>(&self, rng: &mut impl Rng) -> Sequential<T> {
        let c = self.backbone.out_channels;
        let mut out = Conv2d::new(self.head_channels, self.head_outputs(), 1, 1, rng);
        // Small logits at start; background slightly favoured.
        out.weight.value.iter_mut().for_each(|w| *w *= T::of(0.1));
        out.bias.value[0] = T::of(2.0);
        Sequential::new(vec![
            Layer::Conv(Conv2d::new(c, self.head_channels, 3, 1, rng)),
            Layer::Relu,
            Layer::Conv(out),
        ])
    }
}

/// Runs the backbone on a batch of images; the spatial extent must be divisible by the stride.
pub fn extract_features<T: Real>(
    images: &Tensor<T>,
    backbone: &Sequential<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    check_divisible(images, stride)?;
    backbone.infer(images)
}

pub(crate) fn check_divisible<T: Real>(images: &Tensor<T>, stride: usize) -> Result<()> {
    if !images.height().is_multiple_of(stride) || !images.width().is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "image extent {}x{} is not divisible by stride {stride}",
            images.height(),
            images.width()
        )));
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Log-space clamp for decoded box sizes.
const MAX_LOG_SIZE: f64 = 6.0;

/// One candidate per feature cell of batch item `b` (best foreground class).
pub fn decode<T: Real>(
    raw: &Tensor<T>,
    b: usize,
    num_classes: usize,
    stride: usize,
) -> Vec<Detection> {
    let [_, ch, h, w] = raw.shape();
    assert_eq!(ch, num_classes + 5, "head output channel count");
    let (img_w, img_h) = ((w * stride) as f32, (h * stride) as f32);
    let s = stride as f64;
    let mut out = Vec::with_capacity(h * w);
    let mut logits = vec![0.0; num_classes + 1];
    for i in 0..h {
        for j in 0..w {
            for (k, l) in logits.iter_mut().enumerate() {
                *l = raw.at(b, k, i, j).f64();
            }
            let p = softmax(&logits);
            let (cls, score) = p[1..]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            let reg = |k: usize| raw.at(b, num_classes + 1 + k, i, j).f64();
            let cx = (j as f64 + 0.5) * s + reg(0) * s;
            let cy = (i as f64 + 0.5) * s + reg(1) * s;
            let bw = s * reg(2).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
            let bh = s * reg(3).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
            let bbox = BBox::new(
                (cx - bw / 2.0) as f32,
                (cy - bh / 2.0) as f32,
                (cx + bw / 2.0) as f32,
                (cy + bh / 2.0) as f32,
            )
            .clip(img_w, img_h);
            if bbox.is_valid() {
                out.push(Detection {
                    bbox,
                    class_id: cls,
                    score: score as f32,
                });
            }
        }
    }
    out
}

/// Decodes, thresholds at `tau` and suppresses overlapping detections for item `b`.
pub fn detect<T: Real>(
    raw: &Tensor<T>,
    b: usize,
    num_classes: usize,
    stride: usize,
    tau: f32,
    nms_iou: f32,
) -> Vec<Detection> {
    filter_and_suppress(&decode(raw, b, num_classes, stride), tau, nms_iou)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Classification plus regression.
    Source,
    /// Classification only; regression is reported but carries no gradient.
    Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Regression target of `bbox` for the cell centered at `(cx, cy)`.
pub fn encode_box(bbox: &BBox, cx: f64, cy: f64, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let (bx, by) = bbox.center();
    [
        (bx as f64 - cx) / s,
        (by as f64 - cy) / s,
        (bbox.width() as f64 / s).ln(),
        (bbox.height() as f64 / s).ln(),
    ]
}

/// Cell-to-object assignment for one image: `Some(target index)` for positive cells.
///
/// A cell is positive for the smallest box that strictly contains its center;
/// a box containing no cell center claims the free cell under its own center.
pub fn assign_cells(targets: &[Annotation], h: usize, w: usize, stride: usize) -> Vec<Option<usize>> {
    let s = stride as f32;
    let mut assign = vec![None; h * w];
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = ((j as f32 + 0.5) * s, (i as f32 + 0.5) * s);
            let mut best: Option<(usize, f32)> = None;
            for (t, a) in targets.iter().enumerate() {
                if a.bbox.contains(cx, cy) && best.is_none_or(|(_, area)| a.bbox.area() < area) {
                    best = Some((t, a.bbox.area()));
                }
            }
            assign[i * w + j] = best.map(|(t, _)| t);
        }
    }
    for (t, a) in targets.iter().enumerate() {
        if assign.contains(&Some(t)) {
            continue;
        }
        let (bx, by) = a.bbox.center();
        let j = ((bx / s).floor().max(0.0) as usize).min(w - 1);
        let i = ((by / s).floor().max(0.0) as usize).min(h - 1);
        if assign[i * w + j].is_none() {
            assign[i * w + j] = Some(t);
        }
    }
    assign
}

fn validate_targets(targets: &[Annotation], num_classes: usize, width: f32, height: f32) -> Result<()> {
    const SLACK: f32 = 1e-3;
    for a in targets {
        let b = a.bbox;
        if !b.is_valid()
            || b.x_min < -SLACK
            || b.y_min < -SLACK
            || b.x_max > width + SLACK
            || b.y_max > height + SLACK
        {
            return Err(Error::InvalidTarget(format!("box {b:?} is malformed or outside the image")));
        }
        if a.class_id >= num_classes {
            return Err(Error::InvalidTarget(format!(
                "class {} out of range for {num_classes} classes",
                a.class_id
            )));
        }
    }
    Ok(())
}

/// Detection loss over a batch of raw head outputs and its gradient.
///
/// Classification is softmax cross-entropy (background included) averaged over
/// all cells; regression is smooth-L1 on positive cells averaged over the
/// number of positives. `total = cls + reg_weight * reg` in source mode and
/// `total = cls` in target mode.
pub fn detection_loss<T: Real>(
    raw: &Tensor<T>,
    targets: &[&[Annotation]],
    num_classes: usize,
    stride: usize,
    reg_weight: f64,
    mode: LossMode,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let [n, ch, h, w] = raw.shape();
    if ch != num_classes + 5 {
        return Err(Error::Shape(format!(
            "head output has {ch} channels, expected {}",
            num_classes + 5
        )));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{} target lists for batch of {n}", targets.len())));
    }
    let (img_w, img_h) = ((w * stride) as f32, (h * stride) as f32);
    for t in targets {
        validate_targets(t, num_classes, img_w, img_h)?;
    }
    let cells = (n * h * w) as f64;
    let s = stride as f64;
    let assignments: Vec<Vec<Option<usize>>> =
        targets.iter().map(|t| assign_cells(t, h, w, stride)).collect();
    let positives = assignments
        .iter()
        .map(|a| a.iter().filter(|c| c.is_some()).count())
        .sum::<usize>()
        .max(1) as f64;
    let use_reg = mode == LossMode::Source;
    let mut grad = Tensor::<T>::zeros(raw.shape());
    let (mut cls, mut reg) = (0.0f64, 0.0f64);
    let mut logits = vec![0.0; num_classes + 1];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = raw.at(b, k, i, j).f64();
                }
                let p = softmax(&logits);
                let assigned = assignments[b][i * w + j];
                let label = assigned.map_or(0, |t| targets[b][t].class_id + 1);
                cls -= p[label].max(1e-300).ln() / cells;
                for (k, &pk) in p.iter().enumerate() {
                    let onehot = if k == label { 1.0 } else { 0.0 };
                    grad.set(b, k, i, j, T::of((pk - onehot) / cells));
                }
                let Some(t) = assigned else { continue };
                let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let enc = encode_box(&targets[b][t].bbox, cx, cy, stride);
                for (k, e) in enc.iter().enumerate() {
                    let c = num_classes + 1 + k;
                    let (l, d) = smooth_l1(raw.at(b, c, i, j).f64() - e);
                    reg += l / positives;
                    if use_reg {
                        grad.set(b, c, i, j, T::of(reg_weight * d / positives));
                    }
                }
            }
        }
    }
    let total = if use_reg { cls + reg_weight * reg } else { cls };
    Ok((LossBreakdown { cls, reg, total }, grad))
}
