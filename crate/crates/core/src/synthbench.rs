//! Synthetic source/target detection data with controllable geometric shifts.
//!
//! Scenes are continuous: a background field plus non-overlapping shapes placed in
//! normalized scene coordinates. A source pixel looks at the scene directly; a target
//! pixel at `q` looks at `mapping(q)`. Truth boxes bound the rendered per-object masks.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_normalized, HomographyParams, Point2};
use crate::tensor::Tensor;
use crate::transform_approx::{spherical_fov_mapping, viewpoint_mapping, DenseMapping};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Objects per source-frame area; target scenes scale this by their visible extent.
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object diameter range in source-frame pixels.
    pub size_min_px: f64,
    pub size_max_px: f64,
    /// One class per entry, in class-id order.
    pub shapes: Vec<ShapeKind>,
    /// Sub-samples per pixel along each axis.
    pub supersample: usize,
    /// Objects covering fewer pixels after remapping are dropped from the truth.
    pub min_visible_pixels: usize,
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            objects_min: 2,
            objects_max: 4,
            size_min_px: 10.0,
            size_max_px: 20.0,
            shapes: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle],
            supersample: 3,
            min_visible_pixels: 9,
            noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad("need 1 <= objects_min <= objects_max");
        }
        if !(self.size_min_px > 0.0 && self.size_min_px <= self.size_max_px) {
            return bad("need 0 < size_min_px <= size_max_px");
        }
        if self.shapes.is_empty() {
            return bad("at least one shape class is required");
        }
        if self.supersample == 0 {
            return bad("supersample must be positive");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftKind {
    None,
    Fov {
        src_fov: [f64; 2],
        dst_fov: [f64; 2],
    },
    Viewpoint {
        tilt_deg: f64,
        fov_deg: f64,
        zoom: f64,
    },
    /// The target is the source warped by this homography.
    FixedHomography {
        params: HomographyParams,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// Strength of per-image brightness and contrast changes on target images.
    pub jitter: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            kind: ShiftKind::Fov {
                src_fov: [50.0, 26.0],
                dst_fov: [90.0, 34.0],
            },
            jitter: 0.0,
        }
    }
}

impl ShiftSpec {
    /// Where each target pixel looks in scene coordinates.
    pub fn mapping(&self) -> Result<DenseMapping> {
        match &self.kind {
            ShiftKind::None => Ok(DenseMapping::identity()),
            ShiftKind::Fov { src_fov, dst_fov } => {
                spherical_fov_mapping(src_fov[0], src_fov[1], dst_fov[0], dst_fov[1])
            }
            ShiftKind::Viewpoint { tilt_deg, fov_deg, zoom } => viewpoint_mapping(*tilt_deg, *fov_deg, *zoom),
            ShiftKind::FixedHomography { params } => Ok(DenseMapping::from_homography(params.invert())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            source_train: 500,
            source_val: 100,
            target_train: 500,
            target_val: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub scene: SceneSpec,
    pub shift: ShiftSpec,
    pub counts: SplitCounts,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::SourceVal, Split::TargetTrain, Split::TargetVal];

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceVal => Domain::Source,
            Split::TargetTrain | Split::TargetVal => Domain::Target,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceVal => "source_val",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
        }
    }

    /// Target training images are unlabeled; their truth never leaves the generator.
    pub fn labeled(self) -> bool {
        self != Split::TargetTrain
    }

    fn count(self, c: &SplitCounts) -> usize {
        match self {
            Split::SourceTrain => c.source_train,
            Split::SourceVal => c.source_val,
            Split::TargetTrain => c.target_train,
            Split::TargetVal => c.target_val,
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// One rendered image.
#[derive(Clone, Debug)]
pub struct DomainSample {
    pub image: image::RgbImage,
    /// Training-visible labels; `None` for unlabeled samples.
    pub annotations: Option<Vec<Annotation>>,
    /// Full truth, kept for evaluation only.
    pub truth: Vec<Annotation>,
    pub domain: Domain,
    pub split: Split,
    pub index: usize,
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: ShapeKind,
    class_id: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
}

impl Object {
    fn contains(&self, p: Point2) -> bool {
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        // Rotate into the object frame.
        let (u, v) = (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy);
        let r = self.radius;
        match self.shape {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Square => {
                let h = r * 0.85;
                u.abs() <= h && v.abs() <= h
            }
            ShapeKind::Triangle => {
                // Equilateral with circumradius 1.15 r, apex towards -v.
                let c = r * 1.15;
                let bottom = c / 2.0;
                let slope = 3f64.sqrt();
                v <= bottom && slope * u.abs() <= v + c
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Background {
    base: [f64; 3],
    gx: [f64; 3],
    gy: [f64; 3],
}

impl Background {
    fn at(&self, p: Point2) -> [f64; 3] {
        std::array::from_fn(|c| self.base[c] + self.gx[c] * p.x.clamp(-3.0, 3.0) + self.gy[c] * p.y.clamp(-3.0, 3.0))
    }
}

struct Scene {
    background: Background,
    objects: Vec<Object>,
}

/// Axis-aligned bounds of the scene region a view of the frame can see.
fn visible_extent(mapping: &DenseMapping) -> Result<[f64; 4]> {
    let steps = 64;
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for i in 0..=steps {
        for j in 0..=steps {
            let q = Point2 {
                x: -1.0 + 2.0 * i as f64 / steps as f64,
                y: -1.0 + 2.0 * j as f64 / steps as f64,
            };
            let p = mapping.apply(q);
            if !(p.x.is_finite() && p.y.is_finite()) || p.x.abs() > 50.0 || p.y.abs() > 50.0 {
                return Err(Error::Config(format!(
                    "shift `{}` maps the frame to an unbounded region",
                    mapping.name()
                )));
            }
            b = [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)];
        }
    }
    Ok(b)
}

fn sample_scene(spec: &SceneSpec, extent: [f64; 4], rng: &mut ChaCha8Rng) -> Scene {
    let background = Background {
        base: std::array::from_fn(|_| rng.gen_range(0.1..0.45)),
        gx: std::array::from_fn(|_| rng.gen_range(-0.08..0.08)),
        gy: std::array::from_fn(|_| rng.gen_range(-0.08..0.08)),
    };
    let frame_count = rng.gen_range(spec.objects_min..=spec.objects_max) as f64;
    let area = (extent[2] - extent[0]) * (extent[3] - extent[1]) / 4.0;
    let count = ((frame_count * area).round() as usize).max(1);
    let px_to_norm = 2.0 / spec.image_size as f64;
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let radius = rng.gen_range(spec.size_min_px..=spec.size_max_px) * px_to_norm / 2.0;
            let cx = rng.gen_range(extent[0] - radius..=extent[2] + radius);
            let cy = rng.gen_range(extent[1] - radius..=extent[3] + radius);
            let clear = objects
                .iter()
                .all(|o| (o.cx - cx).hypot(o.cy - cy) > 1.25 * (o.radius + radius) + 2.0 * px_to_norm);
            let class_id = rng.gen_range(0..spec.shapes.len());
            let angle: f64 = rng.gen_range(-0.5..0.5);
            let color = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
            if clear {
                objects.push(Object {
                    shape: spec.shapes[class_id],
                    class_id,
                    cx,
                    cy,
                    radius,
                    cos: angle.cos(),
                    sin: angle.sin(),
                    color,
                });
                break;
            }
        }
    }
    Scene { background, objects }
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

/// Renders image `index` of `split`.
pub fn render_sample(spec: &BenchSpec, mapping: &DenseMapping, split: Split, index: usize) -> Result<DomainSample> {
    let scene_spec = &spec.scene;
    let domain = split.domain();
    let view = match domain {
        Domain::Source => DenseMapping::identity(),
        Domain::Target => mapping.clone(),
    };
    let extent = visible_extent(&view)?;
    let mut rng = sample_rng(spec.seed, split, index);
    let scene = sample_scene(scene_spec, extent, &mut rng);
    let (gain, offset) = match domain {
        Domain::Target if spec.shift.jitter > 0.0 => {
            let j = spec.shift.jitter;
            (1.0 + rng.gen_range(-j..=j), rng.gen_range(-j..=j) * 0.5)
        }
        _ => (1.0, 0.0),
    };
    let size = scene_spec.image_size;
    let ss = scene_spec.supersample;
    let mut image = image::RgbImage::new(size as u32, size as u32);
    let mut masks: Vec<Vec<(usize, usize)>> = vec![Vec::new(); scene.objects.len()];
    let noise = rand_distr_normal(scene_spec.noise);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f64; 3];
            let mut hit = vec![false; scene.objects.len()];
            for sy in 0..ss {
                for sx in 0..ss {
                    let fx = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let fy = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let q = Point2 {
                        x: pixel_to_normalized(fx, size),
                        y: pixel_to_normalized(fy, size),
                    };
                    let p = view.apply(q);
                    let color = match scene.objects.iter().position(|o| o.contains(p)) {
                        Some(i) => {
                            hit[i] = true;
                            scene.objects[i].color
                        }
                        None => scene.background.at(p),
                    };
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for (i, h) in hit.iter().enumerate() {
                if *h {
                    masks[i].push((x, y));
                }
            }
            let n = (ss * ss) as f64;
            let px: [u8; 3] = std::array::from_fn(|c| {
                let v = (acc[c] / n) * gain + offset + noise(&mut rng);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            image.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut truth = Vec::new();
    for (obj, mask) in scene.objects.iter().zip(&masks) {
        if mask.len() < scene_spec.min_visible_pixels {
            continue;
        }
        let x_min = mask.iter().map(|m| m.0).min().expect("non-empty");
        let x_max = mask.iter().map(|m| m.0).max().expect("non-empty");
        let y_min = mask.iter().map(|m| m.1).min().expect("non-empty");
        let y_max = mask.iter().map(|m| m.1).max().expect("non-empty");
        truth.push(Annotation {
            bbox: BBox::new(x_min as f32, y_min as f32, (x_max + 1) as f32, (y_max + 1) as f32),
            class_id: obj.class_id,
        });
    }
    Ok(DomainSample {
        image,
        annotations: split.labeled().then(|| truth.clone()),
        truth,
        domain,
        split,
        index,
    })
}

/// Box-Muller normal sampler (zero when `sigma` is zero, consuming no randomness).
fn rand_distr_normal(sigma: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |rng: &mut ChaCha8Rng| {
        if sigma == 0.0 {
            return 0.0;
        }
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Images of one split as a `[n, 3, size, size]` tensor in `[0, 1]` plus optional labels.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub split: Split,
    pub images: Tensor<f32>,
    pub labels: Option<Vec<Vec<Annotation>>>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Result<&[Vec<Annotation>]> {
        self.labels.as_deref().ok_or_else(|| Error::Missing {
            what: "annotations".into(),
            detail: format!("split {} is unlabeled", self.split.name()),
        })
    }

    pub fn image(&self, index: usize) -> image::RgbImage {
        let size = self.images.width();
        let mut out = image::RgbImage::new(size as u32, size as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            *px = image::Rgb(std::array::from_fn(|c| {
                (self.images.at(index, c, y as usize, x as usize) * 255.0).round() as u8
            }));
        }
        out
    }
}

fn to_tensor(images: &[image::RgbImage], size: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros([images.len(), 3, size, size]);
    for (b, img) in images.iter().enumerate() {
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                t.set(b, c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
    }
    t
}

/// A generated benchmark: source and target splits plus hidden target-train truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: BenchSpec,
    splits: Vec<SplitData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        &self.splits[split as usize]
    }

    pub fn num_classes(&self) -> usize {
        self.spec.scene.num_classes()
    }
}

/// Renders every split in index order.
pub fn generate_domain_pair(spec: &BenchSpec) -> Result<Dataset> {
    spec.scene.validate()?;
    let mapping = spec.shift.mapping()?;
    let mut splits = Vec::with_capacity(4);
    for split in Split::ALL {
        let n = split.count(&spec.counts);
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for index in 0..n {
            let s = render_sample(spec, &mapping, split, index)?;
            images.push(s.image);
            labels.push(s.truth);
        }
        splits.push(SplitData {
            split,
            images: to_tensor(&images, spec.scene.image_size),
            labels: split.labeled().then_some(labels),
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        splits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub code_version: String,
    pub spec: BenchSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    file: String,
    domain: Domain,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[f32; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<usize>>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes PNG images, the annotation file and the manifest under `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let image_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut out = BufWriter::new(fs::File::create(&ann_path).map_err(io_err(&ann_path))?);
    for split in Split::ALL {
        let sd = data.split(split);
        for i in 0..sd.len() {
            let file = format!("{}/{}_{:05}.png", IMAGE_DIR, split.name(), i);
            let path = dir.join(&file);
            sd.image(i).save_with_format(&path, image::ImageFormat::Png)?;
            let labels = sd.labels.as_ref().map(|l| &l[i]);
            let record = Record {
                file,
                domain: split.domain(),
                split,
                boxes: labels.map(|l| {
                    l.iter()
                        .map(|a| [a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max])
                        .collect()
                }),
                classes: labels.map(|l| l.iter().map(|a| a.class_id).collect()),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(io_err(&ann_path))?;
        }
    }
    out.flush().map_err(io_err(&ann_path))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        spec: data.spec.clone(),
    };
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&man_path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "dataset".into(),
            detail: format!("{} not found; run the dataset generation stage first", path.display()),
        },
        _ => Error::io(&path, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "dataset format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let size = manifest.spec.scene.image_size;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut images: Vec<Vec<image::RgbImage>> = vec![Vec::new(); 4];
    let mut labels: Vec<Vec<Vec<Annotation>>> = vec![Vec::new(); 4];
    let mut labeled = [true; 4];
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)?;
        let img = image::open(dir.join(&r.file))?.to_rgb8();
        if img.width() as usize != size || img.height() as usize != size {
            return Err(Error::Shape(format!("{} is not {size}x{size}", r.file)));
        }
        let k = r.split as usize;
        images[k].push(img);
        match (r.boxes, r.classes) {
            (Some(b), Some(c)) if b.len() == c.len() => labels[k].push(
                b.iter()
                    .zip(c)
                    .map(|(b, class_id)| Annotation {
                        bbox: BBox::new(b[0], b[1], b[2], b[3]),
                        class_id,
                    })
                    .collect(),
            ),
            (None, None) => labeled[k] = false,
            _ => return Err(Error::InvalidTarget(format!("{}: boxes and classes disagree", r.file))),
        }
    }
    let splits = Split::ALL
        .into_iter()
        .map(|split| {
            let k = split as usize;
            SplitData {
                split,
                images: to_tensor(&images[k], size),
                labels: (labeled[k] && split.labeled()).then(|| std::mem::take(&mut labels[k])),
            }
        })
        .collect();
    Ok(Dataset {
        spec: manifest.spec,
        splits,
    })
}
