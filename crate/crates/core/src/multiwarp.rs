//! Multi-homography detector: warp the input by every homography of a set,
//! extract features per branch, unwarp them with the inverse homographies and
//! fuse the aligned stack into one feature map for the detection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{check_divisible, detect, Detection, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::{HomographyParams, SamplingGrid};
use crate::nn::{Conv2d, Layer, NormMode, Param, Sequential, SequentialCache};
use crate::tensor::{Real, Tensor};

/// Ordered set of homographies; order matters to a learned aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomographySet {
    pub params: Vec<HomographyParams>,
    pub learnable: bool,
}

impl HomographySet {
    pub fn new(params: Vec<HomographyParams>, learnable: bool) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::Config("a homography set needs at least one element".into()));
        }
        Ok(Self { params, learnable })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new(vec![HomographyParams::IDENTITY; n], true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Row-major `N x 4` parameter values.
    pub fn to_flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != 4 * self.params.len() {
            return Err(Error::Shape(format!(
                "{} values for a set of {}",
                flat.len(),
                self.params.len()
            )));
        }
        for (p, chunk) in self.params.iter_mut().zip(flat.chunks(4)) {
            *p = HomographyParams::from_array([chunk[0], chunk[1], chunk[2], chunk[3]])?;
        }
        Ok(())
    }

    /// Smallest pairwise parameter distance (infinite for a single element).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.params.len() {
            for j in i + 1..self.params.len() {
                best = best.min(self.params[i].distance(&self.params[j]));
            }
        }
        best
    }
}

/// Unwarped per-branch feature maps with their validity masks.
#[derive(Clone, Debug)]
pub struct FeatureStack<T = f32> {
    pub maps: Vec<Tensor<T>>,
    /// One `H x W` mask per branch.
    pub masks: Vec<Vec<bool>>,
}

impl<T: Real> FeatureStack<T> {
    pub fn new(maps: Vec<Tensor<T>>, masks: Vec<Vec<bool>>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("empty feature stack".into()))?;
        if maps.len() != masks.len()
            || maps.iter().any(|m| m.shape() != first.shape())
            || masks.iter().any(|m| m.len() != first.plane())
        {
            return Err(Error::Shape("feature stack maps and masks disagree".into()));
        }
        Ok(Self { maps, masks })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Channel-wise concatenation `G = F'_1 (+) ... (+) F'_N` with invalid positions zeroed.
    pub fn concat(&self) -> Tensor<T> {
        let masked: Vec<Tensor<T>> = self
            .maps
            .iter()
            .zip(&self.masks)
            .map(|(m, mask)| apply_mask(m, mask))
            .collect();
        Tensor::concat_channels(&masked).expect("stack extents checked at construction")
    }
}

fn apply_mask<T: Real>(t: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let plane = t.plane();
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask[i % plane] {
            *v = T::zero();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    Mean,
    Max,
}

/// Elementwise mean or max over the valid entries of the stack; all-invalid positions give 0.
pub fn builtin_reducers<T: Real>(stack: &FeatureStack<T>, kind: ReducerKind) -> Tensor<T> {
    reduce_with_routes(stack, kind).0
}

/// Reduction plus, per output element, the contributing branches (for the backward pass).
fn reduce_with_routes<T: Real>(stack: &FeatureStack<T>, kind: ReducerKind) -> (Tensor<T>, Vec<Route>) {
    let shape = stack.maps[0].shape();
    let plane = stack.maps[0].plane();
    let mut out = Tensor::zeros(shape);
    let mut routes = Vec::with_capacity(out.data().len());
    for (e, o) in out.data_mut().iter_mut().enumerate() {
        let pix = e % plane;
        let valid = stack.masks.iter().enumerate().filter(|(_, m)| m[pix]).map(|(i, _)| i);
        match kind {
            ReducerKind::Mean => {
                let mut count = 0usize;
                let mut s = T::zero();
                for i in valid {
                    s += stack.maps[i].data()[e];
                    count += 1;
                }
                if count > 0 {
                    *o = s / T::of(count as f64);
                }
                routes.push(Route::Mean(count as u32));
            }
            ReducerKind::Max => {
                let mut best: Option<(usize, T)> = None;
                for i in valid {
                    let v = stack.maps[i].data()[e];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((i, v));
                    }
                }
                if let Some((i, v)) = best {
                    *o = v;
                    routes.push(Route::Max(Some(i as u32)));
                } else {
                    routes.push(Route::Max(None));
                }
            }
        }
    }
    (out, routes)
}

/// Per-branch gradient of a reduction given the gradient of its output.
fn route_grads<T: Real>(routes: &[Route], cache: &ForwardCache<T>, g_fused: &Tensor<T>) -> Vec<Tensor<T>> {
    let masks: Vec<Vec<bool>> = cache.branches.iter().map(|b| b.warp_out.valid_mask()).collect();
    let plane = g_fused.plane();
    let mut grads = vec![Tensor::zeros(g_fused.shape()); masks.len()];
    for (e, route) in routes.iter().enumerate() {
        let g = g_fused.data()[e];
        match *route {
            Route::Mean(0) | Route::Max(None) => {}
            Route::Mean(count) => {
                let share = g / T::of(count as f64);
                for (i, mask) in masks.iter().enumerate() {
                    if mask[e % plane] {
                        grads[i].data_mut()[e] = share;
                    }
                }
            }
            Route::Max(Some(i)) => grads[i as usize].data_mut()[e] = g,
        }
    }
    grads
}

#[derive(Clone, Copy, Debug)]
enum Route {
    Mean(u32),
    Max(Option<u32>),
}

/// Learned fusion of `N` unwarped feature maps: three `conv 3x3 -> batch norm -> ReLU`
/// blocks from `C * N` to `C` channels, then a `1 x 1` convolution.
///
/// The convolution stack is added to the masked mean of the branches. Its last layer
/// starts at zero, so a fresh aggregator fuses exactly like the mean reducer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Aggregator<T = f32> {
    pub branches: usize,
    pub channels: usize,
    pub net: Sequential<T>,
}

impl<T: Real> Aggregator<T> {
    pub fn new(branches: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        Sequential::conv_block(&mut layers, channels * branches, channels, 3, 1, rng);
        Sequential::conv_block(&mut layers, channels, channels, 3, 1, rng);
        Sequential::conv_block(&mut layers, channels, channels, 3, 1, rng);
        let mut last = Conv2d::new(channels, channels, 1, 1, rng);
        last.weight.value.fill(T::zero());
        layers.push(Layer::Conv(last));
        Self {
            branches,
            channels,
            net: Sequential::new(layers),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", rename_all = "snake_case")]
pub enum Fusion<T = f32> {
    Learned(Aggregator<T>),
    Reducer(ReducerKind),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MultiWarp<T = f32> {
    pub set: HomographySet,
    pub fusion: Fusion<T>,
}

/// Normalization behaviour of each trainable part for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormModes {
    pub backbone: NormMode,
    pub aggregator: NormMode,
}

impl NormModes {
    pub const EVAL: Self = Self {
        backbone: NormMode::Running,
        aggregator: NormMode::Running,
    };
}

/// Which gradients a backward pass should produce.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub backbone: bool,
    pub head: bool,
    pub aggregator: bool,
    pub transforms: bool,
}

impl GradRequest {
    pub const ALL: Self = Self {
        backbone: true,
        head: true,
        aggregator: true,
        transforms: true,
    };
}

/// Parameter groups of a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
    Aggregator,
}

struct Branch<T> {
    warp_in: SamplingGrid,
    backbone: SequentialCache<T>,
    features: Tensor<T>,
    warp_out: SamplingGrid,
}

enum FusionCache<T> {
    Learned(SequentialCache<T>, Vec<Route>),
    Reducer(Vec<Route>),
}

/// State retained by [`Model::forward`] for [`Model::backward`].
pub struct ForwardCache<T> {
    input: Tensor<T>,
    plain: Option<SequentialCache<T>>,
    branches: Vec<Branch<T>>,
    fusion: Option<FusionCache<T>>,
    head: SequentialCache<T>,
}

/// Backbone and head, optionally wrapped in a multi-homography front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Model<T = f32> {
    pub config: DetectorConfig,
    pub backbone: Sequential<T>,
    pub head: Sequential<T>,
    pub warp: Option<MultiWarp<T>>,
}

impl<T: Real> Model<T> {
    /// A freshly initialized plain detector.
    pub fn new(config: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backbone: config.backbone.build(rng),
            head: config.build_head(rng),
            config,
            warp: None,
        })
    }

    pub fn stride(&self) -> usize {
        self.config.backbone.stride
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.out_channels
    }

    pub fn homographies(&self) -> Option<&HomographySet> {
        self.warp.as_ref().map(|w| &w.set)
    }

    pub fn homographies_mut(&mut self) -> Option<&mut HomographySet> {
        self.warp.as_mut().map(|w| &mut w.set)
    }

    pub fn aggregator(&self) -> Option<&Aggregator<T>> {
        match &self.warp {
            Some(MultiWarp {
                fusion: Fusion::Learned(a),
                ..
            }) => Some(a),
            _ => None,
        }
    }

    fn check_configuration(&self) -> Result<()> {
        if let Some(w) = &self.warp {
            if let Fusion::Learned(a) = &w.fusion {
                if a.branches != w.set.len() {
                    return Err(Error::Config(format!(
                        "aggregator was built for {} homographies but the set has {}",
                        a.branches,
                        w.set.len()
                    )));
                }
                if a.channels != self.channels() {
                    return Err(Error::Config("aggregator channel count differs from backbone".into()));
                }
            }
        }
        Ok(())
    }

    /// The unwarped per-branch features for `images` (running normalization statistics).
    pub fn feature_stack(&self, images: &Tensor<T>) -> Result<FeatureStack<T>> {
        check_divisible(images, self.stride())?;
        let set = self
            .homographies()
            .ok_or_else(|| Error::Config("model has no homography set".into()))?;
        let (h, w) = (images.height(), images.width());
        let mut maps = Vec::with_capacity(set.len());
        let mut masks = Vec::with_capacity(set.len());
        for p in &set.params {
            let warped = SamplingGrid::new(p, h, w)?.sample(images)?;
            let features = self.backbone.infer(&warped)?;
            let grid = SamplingGrid::new(&p.invert(), features.height(), features.width())?;
            maps.push(grid.sample(&features)?);
            masks.push(grid.valid_mask());
        }
        FeatureStack::new(maps, masks)
    }

    /// Feature map fed to the detection head (`H x W x C` per image).
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_configuration()?;
        check_divisible(images, self.stride())?;
        match &self.warp {
            None => self.backbone.infer(images),
            Some(mw) => {
                let stack = self.feature_stack(images)?;
                match &mw.fusion {
                    Fusion::Learned(a) => {
                        let mut out = a.net.infer(&stack.concat())?;
                        out.add_assign(&builtin_reducers(&stack, ReducerKind::Mean));
                        Ok(out)
                    }
                    Fusion::Reducer(kind) => Ok(builtin_reducers(&stack, *kind)),
                }
            }
        }
    }

    /// Raw head output in evaluation mode.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.infer(&self.features(images)?)
    }

    /// Per-image detections scoring at least `tau`, after class-wise NMS.
    pub fn detect(&self, images: &Tensor<T>, tau: f32, nms_iou: f32) -> Result<Vec<Vec<Detection>>> {
        let raw = self.infer(images)?;
        Ok((0..images.batch())
            .map(|b| detect(&raw, b, self.config.num_classes, self.stride(), tau, nms_iou))
            .collect())
    }

    /// Training forward pass retaining everything [`Model::backward`] needs.
    pub fn forward(&mut self, images: &Tensor<T>, modes: NormModes) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_configuration()?;
        check_divisible(images, self.stride())?;
        let (h, w) = (images.height(), images.width());
        let mut plain = None;
        let mut branches = Vec::new();
        let mut fusion = None;
        let fused = match &mut self.warp {
            None => {
                let (f, c) = self.backbone.forward(images, modes.backbone)?;
                plain = Some(c);
                f
            }
            Some(mw) => {
                let mut maps = Vec::with_capacity(mw.set.len());
                let mut masks = Vec::with_capacity(mw.set.len());
                for p in &mw.set.params {
                    let warp_in = SamplingGrid::new(p, h, w)?;
                    let warped = warp_in.sample(images)?;
                    let (features, bc) = self.backbone.forward(&warped, modes.backbone)?;
                    let warp_out = SamplingGrid::new(&p.invert(), features.height(), features.width())?;
                    maps.push(warp_out.sample(&features)?);
                    masks.push(warp_out.valid_mask());
                    branches.push(Branch {
                        warp_in,
                        backbone: bc,
                        features,
                        warp_out,
                    });
                }
                let stack = FeatureStack::new(maps, masks)?;
                match &mut mw.fusion {
                    Fusion::Learned(a) => {
                        let (mut out, ac) = a.net.forward(&stack.concat(), modes.aggregator)?;
                        let (mean, routes) = reduce_with_routes(&stack, ReducerKind::Mean);
                        out.add_assign(&mean);
                        fusion = Some(FusionCache::Learned(ac, routes));
                        out
                    }
                    Fusion::Reducer(kind) => {
                        let (out, routes) = reduce_with_routes(&stack, *kind);
                        fusion = Some(FusionCache::Reducer(routes));
                        out
                    }
                }
            }
        };
        let (raw, head) = self.head.forward(&fused, NormMode::Running)?;
        let input = if branches.is_empty() { Tensor::zeros([0, 0, 0, 0]) } else { images.clone() };
        Ok((
            raw,
            ForwardCache {
                input,
                plain,
                branches,
                fusion,
                head,
            },
        ))
    }

    /// Accumulates the requested parameter gradients and returns `dL/dH_i` for every homography.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<T>,
        grad_raw: &Tensor<T>,
        req: GradRequest,
    ) -> Result<Vec<[f64; 4]>> {
        let warped = self.warp.is_some();
        let transforms = req.transforms && warped;
        let upstream = req.backbone || req.aggregator || transforms;
        let Some(g_fused) = self.head.backward(&cache.head, grad_raw, req.head, upstream) else {
            return Ok(Vec::new());
        };
        let Some(mw) = self.warp.as_mut() else {
            if req.backbone {
                let plain = cache.plain.as_ref().expect("plain cache");
                self.backbone.backward(plain, &g_fused, true, false);
            }
            return Ok(Vec::new());
        };
        let n = mw.set.len();
        let need_branch_grads = req.backbone || transforms;
        let branch_grads: Vec<Tensor<T>> = match (&mut mw.fusion, cache.fusion.as_ref()) {
            (Fusion::Learned(a), Some(FusionCache::Learned(ac, routes))) => {
                match a.net.backward(ac, &g_fused, req.aggregator, need_branch_grads) {
                    Some(g) => {
                        let mut grads = g.split_channels(n);
                        for (acc, extra) in grads.iter_mut().zip(route_grads(routes, cache, &g_fused)) {
                            acc.add_assign(&extra);
                        }
                        grads
                    }
                    None => return Ok(vec![[0.0; 4]; n]),
                }
            }
            (Fusion::Reducer(_), Some(FusionCache::Reducer(routes))) => {
                if !need_branch_grads {
                    return Ok(vec![[0.0; 4]; n]);
                }
                route_grads(routes, cache, &g_fused)
            }
            _ => return Err(Error::Config("forward cache does not match fusion kind".into())),
        };
        let mut out = vec![[0.0f64; 4]; n];
        for (i, (br, g)) in cache.branches.iter().zip(&branch_grads).enumerate() {
            // Invalid positions were zeroed after sampling; their gradient is zero too.
            let mask = br.warp_out.valid_mask();
            let g = apply_mask(g, &mask);
            let (g_feat, g_inv) = br.warp_out.backward(&br.features, &g, true)?;
            let p = mw.set.params[i];
            if transforms {
                let jac = p.invert_jacobian();
                for (k, o) in out[i].iter_mut().enumerate() {
                    *o += (0..4).map(|r| g_inv[r] * jac[r][k]).sum::<f64>();
                }
            }
            let g_feat = g_feat.expect("input gradient requested");
            if let Some(g_img) = self.backbone.backward(&br.backbone, &g_feat, req.backbone, transforms) {
                let (_, g_p) = br.warp_in.backward(&cache.input, &g_img, false)?;
                for k in 0..4 {
                    out[i][k] += g_p[k];
                }
            }
        }
        Ok(out)
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> Vec<&mut Param<T>> {
        match group {
            ParamGroup::Backbone => self.backbone.params_mut(),
            ParamGroup::Head => self.head.params_mut(),
            ParamGroup::Aggregator => match &mut self.warp {
                Some(MultiWarp {
                    fusion: Fusion::Learned(a),
                    ..
                }) => a.net.params_mut(),
                _ => Vec::new(),
            },
        }
    }

    pub fn zero_grad(&mut self) {
        for g in [ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Aggregator] {
            self.params_mut(g).into_iter().for_each(Param::zero_grad);
        }
    }

    /// Every network value (parameters and running statistics) in a fixed order.
    pub fn network_state(&self) -> Vec<&[T]> {
        let mut out = self.backbone.state();
        out.extend(self.head.state());
        if let Some(a) = self.aggregator() {
            out.extend(a.net.state());
        }
        out
    }

    pub fn network_state_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.backbone.state_mut();
        out.extend(self.head.state_mut());
        if let Some(MultiWarp {
            fusion: Fusion::Learned(a),
            ..
        }) = &mut self.warp
        {
            out.extend(a.net.state_mut());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            head: self.head.cast(),
            warp: self.warp.as_ref().map(|mw| MultiWarp {
                set: mw.set.clone(),
                fusion: match &mw.fusion {
                    Fusion::Learned(a) => Fusion::Learned(Aggregator {
                        branches: a.branches,
                        channels: a.channels,
                        net: a.net.cast(),
                    }),
                    Fusion::Reducer(k) => Fusion::Reducer(*k),
                },
            }),
        }
    }
}
