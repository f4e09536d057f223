//! Three training stages: a source-only base detector, an aggregator trained over
//! randomly sampled homography sets, and mean-teacher adaptation that learns the
//! homographies (and optionally the network) from pseudo-labeled target images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{detection_loss, filter_and_suppress, Annotation, BBox, Detection, DetectorConfig, LossBreakdown, LossMode};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalOptions};
use crate::geometry::HomographyParams;
use crate::multiwarp::{Aggregator, Fusion, GradRequest, HomographySet, Model, MultiWarp, NormModes, ParamGroup, ReducerKind};
use crate::nn::{Adam, NormMode, Sgd};
use crate::synthbench::SplitData;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingRanges {
    pub s: [f64; 2],
    pub l: [f64; 2],
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            s: [0.5, 2.0],
            l: [-0.5, 0.5],
        }
    }
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s[0] > 0.0
            && self.s[0] <= self.s[1]
            && self.l[0] <= self.l[1]
            && self.s.iter().chain(&self.l).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sampling ranges {self:?}")))
        }
    }
}

/// `n` independent draws with every parameter uniform in its range.
pub fn sample_homography_set(n: usize, ranges: &SamplingRanges, rng: &mut impl Rng) -> Result<HomographySet> {
    ranges.validate()?;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let sx = rng.gen_range(ranges.s[0]..=ranges.s[1]);
        let sy = rng.gen_range(ranges.s[0]..=ranges.s[1]);
        let lx = rng.gen_range(ranges.l[0]..=ranges.l[1]);
        let ly = rng.gen_range(ranges.l[0]..=ranges.l[1]);
        params.push(HomographyParams::new(sx, sy, lx, ly)?);
    }
    HomographySet::new(params, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Learned,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Homographies, backbone, head and aggregator all learn after warmup.
    Full,
    /// Only the homographies learn.
    TransformsOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformInit {
    /// Fresh draw from the sampling ranges.
    Sampled,
    Identity,
    /// Keep whatever set the starting model carries.
    Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear learning-rate ramp before cosine decay.
    pub lr_warmup: usize,
    pub flip: bool,
    /// Random translation of up to this many pixels (edge-replicated crop).
    pub max_shift_px: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_warmup: 100,
            flip: true,
            max_shift_px: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_warmup: usize,
    pub fusion: FusionKind,
    /// Number of fixed random sets used for the held-out loss.
    pub held_out_sets: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_warmup: 50,
            fusion: FusionKind::Learned,
            held_out_sets: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub steps: usize,
    /// Initial steps during which only the homographies learn.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub lr_network: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_transform: f64,
    /// Weight of the target-domain loss.
    pub lambda: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f32,
    /// Teacher averaging coefficient.
    pub alpha: f64,
    pub nms_iou: f32,
    pub mode: AdaptMode,
    pub init: TransformInit,
    /// Brightness/contrast jitter strength for student inputs.
    pub color_jitter: f32,
    pub flip: bool,
    pub max_shift_px: usize,
    /// Scale bounds enforced after each homography update.
    pub scale_clamp: [f64; 2],
    /// Evaluate the teacher on the target validation split every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            warmup_steps: 100,
            batch_size: 8,
            lr_network: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_transform: 0.002,
            lambda: 0.1,
            tau: 0.6,
            alpha: 0.99,
            nms_iou: 0.5,
            mode: AdaptMode::Full,
            init: TransformInit::Identity,
            color_jitter: 0.2,
            flip: true,
            max_shift_px: 0,
            scale_clamp: [0.1, 10.0],
            eval_every: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.scale_clamp[0] > 0.0 && self.scale_clamp[0] < self.scale_clamp[1]) {
            return Err(Error::Config("scale_clamp must be an increasing positive pair".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    /// Number of homographies `N`.
    pub n: usize,
    pub ranges: SamplingRanges,
    pub base: BaseConfig,
    pub aggregator: AggregatorConfig,
    pub adapt: AdaptConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 5,
            ranges: SamplingRanges::default(),
            base: BaseConfig::default(),
            aggregator: AggregatorConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.base.batch_size == 0 || self.aggregator.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.ranges.validate()?;
        self.adapt.validate()
    }
}

/// Independent random streams per stage, all derived from one seed.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

const STREAM_BASE_INIT: u64 = 1;
const STREAM_BASE: u64 = 2;
const STREAM_AGG_INIT: u64 = 3;
const STREAM_AGG: u64 = 4;
const STREAM_ADAPT_INIT: u64 = 5;
const STREAM_ADAPT: u64 = 6;

/// Shuffled passes over `0..n`.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn cosine_lr(base: f64, warmup: usize, total: usize, step: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Random flip and translation applied to a batch and its boxes.
fn augment(
    images: &Tensor<f32>,
    labels: Option<&[Vec<Annotation>]>,
    flip: bool,
    max_shift: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Option<Vec<Vec<Annotation>>>) {
    let [n, c, h, w] = images.shape();
    let mut out = images.clone();
    let mut out_labels = labels.map(|l| l.to_vec());
    for b in 0..n {
        let do_flip = flip && rng.gen_bool(0.5);
        let m = max_shift as i64;
        let (dx, dy) = if m > 0 {
            (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
        } else {
            (0, 0)
        };
        if !do_flip && dx == 0 && dy == 0 {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                    let sx = if do_flip { w - 1 - sx } else { sx };
                    out.set(b, ch, y, x, images.at(b, ch, sy, sx));
                }
            }
        }
        if let Some(ls) = out_labels.as_mut() {
            ls[b] = ls[b]
                .iter()
                .filter_map(|a| {
                    let bb = if do_flip { a.bbox.flip_horizontal(w as f32) } else { a.bbox };
                    let moved = BBox::new(
                        bb.x_min + dx as f32,
                        bb.y_min + dy as f32,
                        bb.x_max + dx as f32,
                        bb.y_max + dy as f32,
                    )
                    .clip(w as f32, h as f32);
                    (moved.width() >= 2.0 && moved.height() >= 2.0).then_some(Annotation {
                        bbox: moved,
                        class_id: a.class_id,
                    })
                })
                .collect();
        }
    }
    (out, out_labels)
}

/// Per-image brightness and contrast changes.
fn color_jitter(images: &Tensor<f32>, strength: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if strength <= 0.0 {
        return images.clone();
    }
    let mut out = images.clone();
    let n = images.batch();
    for b in 0..n {
        let contrast = 1.0 + rng.gen_range(-strength..=strength);
        let brightness = 0.5 * rng.gen_range(-strength..=strength);
        let item = out.item_mut(b);
        let mean = item.iter().sum::<f32>() / item.len() as f32;
        for v in item.iter_mut() {
            *v = ((*v - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
        }
    }
    out
}

/// Loss of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub lr: f64,
}

fn require_labels(split: &SplitData) -> Result<&[Vec<Annotation>]> {
    if split.is_empty() {
        return Err(Error::EmptyDataset(format!("split {} has no images", split.split.name())));
    }
    split.labels()
}

fn as_refs(labels: &[Vec<Annotation>]) -> Vec<&[Annotation]> {
    labels.iter().map(Vec::as_slice).collect()
}

fn gather_labels(labels: &[Vec<Annotation>], idx: &[usize]) -> Vec<Vec<Annotation>> {
    idx.iter().map(|&i| labels[i].clone()).collect()
}

#[derive(Clone, Debug)]
pub struct BaseRun {
    pub model: Model,
    pub trace: Vec<StepLoss>,
}

/// Trains backbone and head on labeled source images with the source loss.
pub fn train_base(source: &SplitData, detector: &DetectorConfig, cfg: &TrainingConfig) -> Result<BaseRun> {
    cfg.validate()?;
    let labels = require_labels(source)?;
    let mut model = Model::new(detector.clone(), &mut stage_rng(cfg.seed, STREAM_BASE_INIT))?;
    let mut rng = stage_rng(cfg.seed, STREAM_BASE);
    let b = &cfg.base;
    let mut sampler = Sampler::new(source.len());
    let mut sgd_backbone = Sgd::new(b.lr, b.momentum, b.weight_decay);
    let mut sgd_head = Sgd::new(b.lr, b.momentum, b.weight_decay);
    let modes = NormModes {
        backbone: NormMode::Batch,
        aggregator: NormMode::Running,
    };
    let mut trace = Vec::with_capacity(b.steps);
    for step in 0..b.steps {
        let idx = sampler.batch(b.batch_size, &mut rng);
        let batch_labels = gather_labels(labels, &idx);
        let (images, batch_labels) = augment(&source.images.select(&idx), Some(&batch_labels), b.flip, b.max_shift_px, &mut rng);
        let batch_labels = batch_labels.expect("labels given");
        let (raw, cache) = model.forward(&images, modes)?;
        let (loss, grad) = detection_loss(
            &raw,
            &as_refs(&batch_labels),
            detector.num_classes,
            model.stride(),
            detector.reg_weight,
            LossMode::Source,
        )?;
        model.zero_grad();
        model.backward(
            &cache,
            &grad,
            GradRequest {
                backbone: true,
                head: true,
                ..GradRequest::default()
            },
        )?;
        let lr = cosine_lr(b.lr, b.lr_warmup, b.steps, step);
        sgd_backbone.lr = lr;
        sgd_head.lr = lr;
        sgd_backbone.step(model.params_mut(ParamGroup::Backbone));
        sgd_head.step(model.params_mut(ParamGroup::Head));
        trace.push(StepLoss {
            step,
            cls: loss.cls,
            reg: loss.reg,
            total: loss.total,
            lr,
        });
    }
    model.zero_grad();
    Ok(BaseRun { model, trace })
}

#[derive(Clone, Debug)]
pub struct AggregatorRun {
    pub model: Model,
    pub trace: Vec<StepLoss>,
    /// Held-out source loss under fixed random sets before and after training.
    pub held_out_before: Option<f64>,
    pub held_out_after: Option<f64>,
}

/// Mean source loss of `model` on `split` under each of `sets`.
pub fn held_out_loss(model: &Model, split: &SplitData, sets: &[HomographySet], batch_size: usize) -> Result<f64> {
    let labels = require_labels(split)?;
    let mut m = model.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    let sets: Vec<Option<&HomographySet>> = if m.warp.is_some() {
        sets.iter().map(Some).collect()
    } else {
        vec![None]
    };
    for set in sets {
        if let (Some(s), Some(w)) = (set, m.warp.as_mut()) {
            w.set = s.clone();
        }
        for start in (0..split.len()).step_by(batch_size.max(1)) {
            let idx: Vec<usize> = (start..(start + batch_size).min(split.len())).collect();
            let raw = m.infer(&split.images.select(&idx))?;
            let batch_labels = gather_labels(labels, &idx);
            let (loss, _) = detection_loss(
                &raw,
                &as_refs(&batch_labels),
                m.config.num_classes,
                m.stride(),
                m.config.reg_weight,
                LossMode::Source,
            )?;
            total += loss.total * idx.len() as f64;
            count += idx.len();
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Wraps a plain model in an `N`-way multi-homography front end.
pub fn attach_multiwarp(base: &Model, n: usize, fusion: FusionKind, rng: &mut impl Rng) -> Result<Model> {
    if base.warp.is_some() {
        return Err(Error::Config("model already has a homography front end".into()));
    }
    let mut model = base.clone();
    model.warp = Some(MultiWarp {
        set: HomographySet::identity(n)?,
        fusion: match fusion {
            FusionKind::Learned => Fusion::Learned(Aggregator::new(n, model.channels(), rng)),
            FusionKind::Mean => Fusion::Reducer(ReducerKind::Mean),
            FusionKind::Max => Fusion::Reducer(ReducerKind::Max),
        },
    });
    Ok(model)
}

/// Trains only the aggregator, with a fresh random homography set every step.
///
/// The returned model carries the identity set.
pub fn train_aggregator(
    base: &Model,
    source: &SplitData,
    held_out: Option<&SplitData>,
    cfg: &TrainingConfig,
) -> Result<AggregatorRun> {
    cfg.validate()?;
    let labels = require_labels(source)?;
    let a = &cfg.aggregator;
    let mut init_rng = stage_rng(cfg.seed, STREAM_AGG_INIT);
    let mut model = attach_multiwarp(base, cfg.n, a.fusion, &mut init_rng)?;
    let held_sets: Vec<HomographySet> = (0..a.held_out_sets)
        .map(|_| sample_homography_set(cfg.n, &cfg.ranges, &mut init_rng))
        .collect::<Result<_>>()?;
    let held_out_before = held_out
        .map(|h| held_out_loss(&model, h, &held_sets, 16))
        .transpose()?;
    let mut rng = stage_rng(cfg.seed, STREAM_AGG);
    let mut sampler = Sampler::new(source.len());
    let mut sgd = Sgd::new(a.lr, a.momentum, a.weight_decay);
    let learned = matches!(a.fusion, FusionKind::Learned);
    let modes = NormModes {
        backbone: NormMode::Running,
        aggregator: NormMode::Batch,
    };
    let mut trace = Vec::with_capacity(a.steps);
    for step in 0..a.steps {
        let set = sample_homography_set(cfg.n, &cfg.ranges, &mut rng)?;
        let idx = sampler.batch(a.batch_size, &mut rng);
        let batch_labels = gather_labels(labels, &idx);
        let (images, batch_labels) =
            augment(&source.images.select(&idx), Some(&batch_labels), cfg.base.flip, cfg.base.max_shift_px, &mut rng);
        let batch_labels = batch_labels.expect("labels given");
        model.warp.as_mut().expect("attached").set = set;
        let (raw, cache) = model.forward(&images, modes)?;
        let (loss, grad) = detection_loss(
            &raw,
            &as_refs(&batch_labels),
            model.config.num_classes,
            model.stride(),
            model.config.reg_weight,
            LossMode::Source,
        )?;
        let lr = cosine_lr(a.lr, a.lr_warmup, a.steps, step);
        if learned {
            model.zero_grad();
            model.backward(
                &cache,
                &grad,
                GradRequest {
                    aggregator: true,
                    ..GradRequest::default()
                },
            )?;
            sgd.lr = lr;
            sgd.step(model.params_mut(ParamGroup::Aggregator));
        }
        trace.push(StepLoss {
            step,
            cls: loss.cls,
            reg: loss.reg,
            total: loss.total,
            lr,
        });
    }
    model.zero_grad();
    model.warp.as_mut().expect("attached").set = HomographySet::identity(cfg.n)?;
    let held_out_after = held_out
        .map(|h| held_out_loss(&model, h, &held_sets, 16))
        .transpose()?;
    Ok(AggregatorRun {
        model,
        trace,
        held_out_before,
        held_out_after,
    })
}

/// Student, teacher and the averaging schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentState {
    pub student: Model,
    pub teacher: Model,
    pub alpha: f64,
    pub step: usize,
    pub warmup_steps: usize,
}

impl TeacherStudentState {
    pub fn new(model: Model, alpha: f64, warmup_steps: usize) -> Self {
        Self {
            teacher: model.clone(),
            student: model,
            alpha,
            step: 0,
            warmup_steps,
        }
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.warmup_steps
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.alpha)
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student` for every network value and homography.
///
/// Mixing happens in `f64`; rounding the result to `f32` keeps it between the two inputs.
pub fn ema_update(teacher: &mut Model, student: &Model, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let src = student.network_state();
    let dst = teacher.network_state_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("teacher and student differ in structure".into()));
    }
    let beta = 1.0 - alpha;
    for (d, s) in dst.into_iter().zip(src) {
        for (t, &v) in d.iter_mut().zip(s) {
            *t = (alpha * *t as f64 + beta * v as f64) as f32;
        }
    }
    match (teacher.homographies_mut(), student.homographies()) {
        (Some(t), Some(s)) if t.len() == s.len() => {
            for (tp, sp) in t.params.iter_mut().zip(&s.params) {
                let (a, b) = (tp.to_array(), sp.to_array());
                *tp = HomographyParams::from_array(std::array::from_fn(|k| alpha * a[k] + beta * b[k]))?;
            }
        }
        (None, None) => {}
        _ => return Err(Error::Shape("teacher and student homography sets differ".into())),
    }
    Ok(())
}

/// Teacher detections promoted to training targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub labels: Vec<Vec<Detection>>,
    pub teacher_step: usize,
    pub tau: f32,
}

impl PseudoLabelBatch {
    /// Targets for the loss: boxes clipped to the image, degenerate ones dropped.
    pub fn annotations(&self, width: f32, height: f32) -> Vec<Vec<Annotation>> {
        self.labels
            .iter()
            .map(|dets| {
                dets.iter()
                    .map(|d| Annotation {
                        bbox: d.bbox.clip(width, height),
                        class_id: d.class_id,
                    })
                    .filter(|a| a.bbox.width() >= 1.0 && a.bbox.height() >= 1.0)
                    .collect()
            })
            .collect()
    }

    pub fn count(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// Teacher predictions on clean target images, kept when scoring at least `tau`, after NMS.
pub fn generate_pseudo_labels(
    teacher: &Model,
    images: &Tensor<f32>,
    tau: f32,
    nms_iou: f32,
    teacher_step: usize,
) -> Result<PseudoLabelBatch> {
    let labels = teacher
        .detect(images, tau, nms_iou)?
        .into_iter()
        .map(|d| filter_and_suppress(&d, tau, nms_iou))
        .collect();
    Ok(PseudoLabelBatch {
        labels,
        teacher_step,
        tau,
    })
}

/// Student objective: source loss plus `lambda` times the target classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptLoss {
    pub source: LossBreakdown,
    pub target: LossBreakdown,
    pub lambda: f64,
    pub total: f64,
}

impl AdaptLoss {
    pub fn new(source: LossBreakdown, target: LossBreakdown, lambda: f64) -> Self {
        Self {
            source,
            target,
            lambda,
            total: source.total + lambda * target.total,
        }
    }
}

/// One line of the adaptation metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub warmup: bool,
    pub loss_src_cls: f64,
    pub loss_src_reg: f64,
    pub loss_tgt_cls: f64,
    pub lambda: f64,
    pub tau: f32,
    pub pseudo_labels: usize,
    /// Student homographies after this step (`N x 4`), empty without a front end.
    #[serde(rename = "T_st")]
    pub transforms: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub state: TeacherStudentState,
    pub trace: Vec<TraceRecord>,
}

fn initial_set(model: &Model, cfg: &TrainingConfig) -> Result<Option<HomographySet>> {
    let Some(current) = model.homographies() else {
        return Ok(None);
    };
    let n = current.len();
    let set = match cfg.adapt.init {
        TransformInit::Keep => current.clone(),
        TransformInit::Identity => HomographySet::new(vec![HomographyParams::IDENTITY; n], current.learnable)?,
        TransformInit::Sampled => {
            let mut s = sample_homography_set(n, &cfg.ranges, &mut stage_rng(cfg.seed, STREAM_ADAPT_INIT))?;
            s.learnable = current.learnable;
            s
        }
    };
    Ok(Some(set))
}

/// Mean-teacher adaptation from a trained model (plain, or with a homography front end).
///
/// `target` is read without labels. `target_val`, when given, is used for periodic teacher AP.
pub fn adapt(
    start: &Model,
    source: &SplitData,
    target: &SplitData,
    target_val: Option<&SplitData>,
    cfg: &TrainingConfig,
) -> Result<AdaptRun> {
    cfg.validate()?;
    let a = &cfg.adapt;
    let src_labels = require_labels(source)?;
    if target.is_empty() {
        return Err(Error::EmptyDataset("target training split has no images".into()));
    }
    let mut model = start.clone();
    if let Some(set) = initial_set(start, cfg)? {
        *model.homographies_mut().expect("front end present") = set;
    }
    model.zero_grad();
    let mut state = TeacherStudentState::new(model, a.alpha, a.warmup_steps);
    let mut rng = stage_rng(cfg.seed, STREAM_ADAPT);
    let mut src_sampler = Sampler::new(source.len());
    let mut tgt_sampler = Sampler::new(target.len());
    let mut adam = Adam::new(a.lr_transform);
    let mut sgd_backbone = Sgd::new(a.lr_network, a.momentum, a.weight_decay);
    let mut sgd_head = Sgd::new(a.lr_network, a.momentum, a.weight_decay);
    let mut sgd_agg = Sgd::new(a.lr_network, a.momentum, a.weight_decay);
    let learn_t = state.student.homographies().is_some_and(|s| s.learnable);
    let num_classes = state.student.config.num_classes;
    let stride = state.student.stride();
    let reg_weight = state.student.config.reg_weight;
    let (width, height) = (target.images.width() as f32, target.images.height() as f32);
    let eval_opts = EvalOptions {
        nms_iou: a.nms_iou,
        ..EvalOptions::default()
    };
    let mut trace = Vec::with_capacity(a.steps);
    for step in 0..a.steps {
        state.step = step;
        let warm = state.in_warmup();
        let train_net = !warm && a.mode == AdaptMode::Full;
        let req = GradRequest {
            backbone: train_net,
            head: train_net,
            aggregator: train_net,
            transforms: learn_t,
        };

        let src_idx = src_sampler.batch(a.batch_size, &mut rng);
        let tgt_idx = tgt_sampler.batch(a.batch_size, &mut rng);
        let (src_img, src_lab) = augment(
            &source.images.select(&src_idx),
            Some(&gather_labels(src_labels, &src_idx)),
            a.flip,
            a.max_shift_px,
            &mut rng,
        );
        let src_lab = src_lab.expect("labels given");
        let src_img = color_jitter(&src_img, a.color_jitter, &mut rng);
        let (tgt_clean, _) = augment(&target.images.select(&tgt_idx), None, a.flip, a.max_shift_px, &mut rng);
        let tgt_img = color_jitter(&tgt_clean, a.color_jitter, &mut rng);

        state.student.zero_grad();
        let (raw, cache) = state.student.forward(&src_img, NormModes::EVAL)?;
        let (src_loss, grad) = detection_loss(&raw, &as_refs(&src_lab), num_classes, stride, reg_weight, LossMode::Source)?;
        drop(raw);
        let mut t_grad = state.student.backward(&cache, &grad, req)?;
        drop(cache);

        let mut tgt_loss = LossBreakdown::default();
        let mut pseudo_count = 0;
        if a.lambda > 0.0 {
            let pseudo = generate_pseudo_labels(&state.teacher, &tgt_clean, a.tau, a.nms_iou, step)?;
            pseudo_count = pseudo.count();
            let targets = pseudo.annotations(width, height);
            let (raw, cache) = state.student.forward(&tgt_img, NormModes::EVAL)?;
            let (loss, mut grad) = detection_loss(&raw, &as_refs(&targets), num_classes, stride, reg_weight, LossMode::Target)?;
            tgt_loss = loss;
            grad.scale(a.lambda as f32);
            let g = state.student.backward(&cache, &grad, req)?;
            for (acc, extra) in t_grad.iter_mut().zip(g) {
                for k in 0..4 {
                    acc[k] += extra[k];
                }
            }
        }

        if learn_t {
            let set = state.student.homographies_mut().expect("front end present");
            let mut flat = set.to_flat();
            let grads: Vec<f64> = t_grad.iter().flatten().copied().collect();
            adam.step(&mut flat, &grads);
            for chunk in flat.chunks_mut(4) {
                chunk[0] = chunk[0].clamp(a.scale_clamp[0], a.scale_clamp[1]);
                chunk[1] = chunk[1].clamp(a.scale_clamp[0], a.scale_clamp[1]);
            }
            set.set_flat(&flat)?;
        }
        if train_net {
            sgd_backbone.step(state.student.params_mut(ParamGroup::Backbone));
            sgd_head.step(state.student.params_mut(ParamGroup::Head));
            if state.student.aggregator().is_some() {
                sgd_agg.step(state.student.params_mut(ParamGroup::Aggregator));
            }
        }
        state.ema_update()?;

        let target_ap = match target_val {
            Some(val) if a.eval_every > 0 && (step + 1) % a.eval_every == 0 => {
                Some(evaluate_model(&state.teacher, &val.images, val.labels()?, &eval_opts)?.ap50)
            }
            _ => None,
        };
        trace.push(TraceRecord {
            step,
            warmup: warm,
            loss_src_cls: src_loss.cls,
            loss_src_reg: src_loss.reg,
            loss_tgt_cls: tgt_loss.cls,
            lambda: a.lambda,
            tau: a.tau,
            pseudo_labels: pseudo_count,
            transforms: state
                .student
                .homographies()
                .map(|s| s.params.iter().map(|p| p.to_array()).collect())
                .unwrap_or_default(),
            target_ap,
        });
    }
    state.step = a.steps;
    state.student.zero_grad();
    Ok(AdaptRun { state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BackboneConfig;
    use crate::synthbench::{generate_domain_pair, BenchSpec, SceneSpec, Split, SplitCounts};

    fn tiny_detector() -> DetectorConfig {
        DetectorConfig {
            backbone: BackboneConfig {
                widths: vec![4, 8],
                out_channels: 8,
                stride: 8,
            },
            num_classes: 3,
            head_channels: 8,
            reg_weight: 1.0,
        }
    }

    fn tiny_data() -> crate::synthbench::Dataset {
        generate_domain_pair(&BenchSpec {
            scene: SceneSpec {
                image_size: 32,
                size_min_px: 6.0,
                size_max_px: 10.0,
                ..SceneSpec::default()
            },
            counts: SplitCounts {
                source_train: 6,
                source_val: 4,
                target_train: 6,
                target_val: 4,
            },
            ..BenchSpec::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            seed: 3,
            n: 2,
            base: BaseConfig {
                steps: 3,
                batch_size: 2,
                ..BaseConfig::default()
            },
            aggregator: AggregatorConfig {
                steps: 2,
                batch_size: 2,
                held_out_sets: 1,
                ..AggregatorConfig::default()
            },
            adapt: AdaptConfig {
                steps: 4,
                warmup_steps: 2,
                batch_size: 2,
                tau: 0.1,
                ..AdaptConfig::default()
            },
            ..TrainingConfig::default()
        }
    }

    fn multi_model(data: &crate::synthbench::Dataset, cfg: &TrainingConfig) -> Model {
        let base = train_base(data.split(Split::SourceTrain), &tiny_detector(), cfg).unwrap();
        train_aggregator(&base.model, data.split(Split::SourceTrain), None, cfg)
            .unwrap()
            .model
    }

    #[test]
    fn ema_matches_hand_computed_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = Model::new(tiny_detector(), &mut rng).unwrap();
        let mut student = attach_multiwarp(&base, 1, FusionKind::Mean, &mut rng).unwrap();
        let mut teacher = student.clone();
        for s in teacher.network_state_mut() {
            s.fill(1.0);
        }
        for s in student.network_state_mut() {
            s.fill(0.0);
        }
        teacher.homographies_mut().unwrap().params[0] = HomographyParams::new(1.0, 1.0, 0.0, 0.0).unwrap();
        student.homographies_mut().unwrap().params[0] = HomographyParams::new(2.0, 0.5, 1.0, -1.0).unwrap();
        ema_update(&mut teacher, &student, 0.99).unwrap();
        for s in teacher.network_state() {
            assert!(s.iter().all(|&v| v == 0.99));
        }
        let t = teacher.homographies().unwrap().params[0].to_array();
        let want = [1.01, 0.995, 0.01, -0.01];
        for k in 0..4 {
            assert!((t[k] - want[k]).abs() < 1e-12, "{t:?}");
        }
        // alpha = 0 copies the student, alpha = 1 keeps the teacher.
        let mut copy = teacher.clone();
        ema_update(&mut copy, &student, 0.0).unwrap();
        assert_eq!(copy, student);
        let mut kept = teacher.clone();
        ema_update(&mut kept, &student, 1.0).unwrap();
        assert_eq!(kept, teacher);
        assert!(ema_update(&mut kept, &student, 1.5).is_err());
    }

    #[test]
    fn adapt_loss_is_linear_in_lambda() {
        let src = LossBreakdown {
            cls: 1.5,
            reg: 0.5,
            total: 2.0,
        };
        let tgt = LossBreakdown {
            cls: 0.8,
            reg: 0.0,
            total: 0.8,
        };
        let l0 = AdaptLoss::new(src, tgt, 0.0).total;
        let l1 = AdaptLoss::new(src, tgt, 0.1).total;
        let l2 = AdaptLoss::new(src, tgt, 0.2).total;
        assert_eq!(l0, 2.0);
        assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn invalid_hyperparameters_are_config_errors() {
        let mut cfg = TrainingConfig::default();
        cfg.adapt.lambda = -0.1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        for tau in [0.0, 1.0, 1.5] {
            let mut cfg = TrainingConfig::default();
            cfg.adapt.tau = tau;
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        assert!(TrainingConfig::default().validate().is_ok());
    }

    #[test]
    fn sampled_sets_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ranges = SamplingRanges::default();
        for _ in 0..50 {
            let set = sample_homography_set(5, &ranges, &mut rng).unwrap();
            for p in &set.params {
                let [sx, sy, lx, ly] = p.to_array();
                assert!((0.5..=2.0).contains(&sx) && (0.5..=2.0).contains(&sy));
                assert!((-0.5..=0.5).contains(&lx) && (-0.5..=0.5).contains(&ly));
            }
        }
    }

    #[test]
    fn warmup_freezes_the_network_and_moves_transforms() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.adapt.steps = 2;
        cfg.adapt.warmup_steps = 2;
        let start = multi_model(&data, &cfg);
        let run = adapt(&start, data.split(Split::SourceTrain), data.split(Split::TargetTrain), None, &cfg).unwrap();
        let before = start.network_state();
        let after = run.state.student.network_state();
        assert!(before.iter().zip(&after).all(|(a, b)| a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()))));
        assert_ne!(run.state.student.homographies(), start.homographies());
        assert!(run.trace.iter().all(|r| r.warmup));

        cfg.adapt.steps = 3;
        let run = adapt(&start, data.split(Split::SourceTrain), data.split(Split::TargetTrain), None, &cfg).unwrap();
        assert_ne!(run.state.student.network_state(), start.network_state());
    }

    #[test]
    fn adaptation_is_deterministic() {
        let data = tiny_data();
        let cfg = tiny_config();
        let start = multi_model(&data, &cfg);
        let a = adapt(&start, data.split(Split::SourceTrain), data.split(Split::TargetTrain), None, &cfg).unwrap();
        let b = adapt(&start, data.split(Split::SourceTrain), data.split(Split::TargetTrain), None, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn zero_lambda_ignores_target_content() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.adapt.lambda = 0.0;
        let start = multi_model(&data, &cfg);
        let target = data.split(Split::TargetTrain);
        let mut scrambled = target.clone();
        scrambled.images.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        let a = adapt(&start, data.split(Split::SourceTrain), target, None, &cfg).unwrap();
        let b = adapt(&start, data.split(Split::SourceTrain), &scrambled, None, &cfg).unwrap();
        assert_eq!(a.state, b.state);
        assert!(a.trace.iter().all(|r| r.pseudo_labels == 0 && r.loss_tgt_cls == 0.0));
    }

    #[test]
    fn pseudo_labels_do_not_depend_on_batch_composition() {
        let data = tiny_data();
        let cfg = tiny_config();
        let teacher = multi_model(&data, &cfg);
        let images = &data.split(Split::TargetTrain).images;
        let all = generate_pseudo_labels(&teacher, images, 0.05, 0.5, 0).unwrap();
        for i in 0..images.batch() {
            let one = generate_pseudo_labels(&teacher, &images.select(&[i]), 0.05, 0.5, 0).unwrap();
            assert_eq!(one.labels.len(), 1);
            assert_eq!(one.labels[0].len(), all.labels[i].len());
            for (x, y) in one.labels[0].iter().zip(&all.labels[i]) {
                assert_eq!(x.class_id, y.class_id);
                assert!((x.score - y.score).abs() < 1e-5);
            }
            assert!(all.labels[i].iter().all(|d| d.score >= 0.05));
        }
    }

    #[test]
    fn aggregator_training_touches_only_the_aggregator() {
        let data = tiny_data();
        let cfg = tiny_config();
        let base = train_base(data.split(Split::SourceTrain), &tiny_detector(), &cfg).unwrap();
        assert_eq!(base.trace.len(), 3);
        let run = train_aggregator(
            &base.model,
            data.split(Split::SourceTrain),
            Some(data.split(Split::SourceVal)),
            &cfg,
        )
        .unwrap();
        assert!(run.held_out_before.unwrap().is_finite() && run.held_out_after.unwrap().is_finite());
        let n_plain = base.model.network_state().len();
        assert_eq!(run.model.network_state()[..n_plain], base.model.network_state()[..]);
        assert!(train_aggregator(&run.model, data.split(Split::SourceTrain), None, &cfg).is_err());
        assert!(matches!(
            train_base(data.split(Split::TargetTrain), &tiny_detector(), &cfg),
            Err(Error::Missing { .. })
        ));
    }
}
