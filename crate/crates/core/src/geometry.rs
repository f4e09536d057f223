//! The four-parameter homography family and differentiable bilinear warping.
//!
//! A homography here is the matrix
//!
//! ```text
//! | s_x  0   0 |
//! | 0    s_y 0 |
//! | l_x  l_y 1 |
//! ```
//!
//! acting on column vectors `(x, y, 1)`. Coordinates are normalized so that an
//! image spans `[-1, 1] x [-1, 1]` with the origin at its center, which makes the
//! same parameters meaningful for images and for strided feature maps.
//!
//! Warps use inverse mapping: the output pixel at `q` samples the input at
//! `H^-1 q`. Samples that land outside the input or beyond the projective
//! horizon are zero-filled and flagged invalid.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Denominator cutoff for projective division.
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Normalized coordinate of the center of pixel `index` along an axis of `extent` pixels.
#[inline]
pub fn pixel_to_normalized(index: f64, extent: usize) -> f64 {
    (index + 0.5) * 2.0 / extent as f64 - 1.0
}

/// Continuous pixel coordinate (pixel centers at integers) of a normalized coordinate.
#[inline]
pub fn normalized_to_pixel(u: f64, extent: usize) -> f64 {
    (u + 1.0) * extent as f64 / 2.0 - 0.5
}

/// Scales `(s_x, s_y)` and perspective factors `(l_x, l_y)` of one homography.
///
/// Scales are strictly positive, so every value of this type is invertible
/// (the matrix determinant is `s_x * s_y`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct HomographyParams {
    sx: f64,
    sy: f64,
    lx: f64,
    ly: f64,
}

impl TryFrom<[f64; 4]> for HomographyParams {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<HomographyParams> for [f64; 4] {
    fn from(p: HomographyParams) -> Self {
        p.to_array()
    }
}

impl Default for HomographyParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl HomographyParams {
    pub const IDENTITY: Self = Self {
        sx: 1.0,
        sy: 1.0,
        lx: 0.0,
        ly: 0.0,
    };

    pub fn new(sx: f64, sy: f64, lx: f64, ly: f64) -> Result<Self> {
        if !(sx.is_finite() && sy.is_finite() && lx.is_finite() && ly.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "homography parameters must be finite, got ({sx}, {sy}, {lx}, {ly})"
            )));
        }
        if sx <= 0.0 || sy <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "homography scales must be positive, got s_x = {sx}, s_y = {sy}"
            )));
        }
        Ok(Self { sx, sy, lx, ly })
    }

    pub fn sx(&self) -> f64 {
        self.sx
    }

    pub fn sy(&self) -> f64 {
        self.sy
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.sx, self.sy, self.lx, self.ly]
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::try_from(v)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.sx, 0.0, 0.0, //
            0.0, self.sy, 0.0, //
            self.lx, self.ly, 1.0,
        )
    }

    /// Projective denominator `l_x x + l_y y + 1` at `q`.
    #[inline]
    pub fn denominator(&self, q: Point2) -> f64 {
        self.lx * q.x + self.ly * q.y + 1.0
    }

    pub fn apply_point(&self, q: Point2) -> Result<Point2> {
        let w = self.denominator(q);
        if w.abs() <= EPS {
            return Err(Error::DegeneratePoint { x: q.x, y: q.y, w });
        }
        Ok(Point2::new(self.sx * q.x / w, self.sy * q.y / w))
    }

    pub fn invert(&self) -> Self {
        Self {
            sx: 1.0 / self.sx,
            sy: 1.0 / self.sy,
            lx: -self.lx / self.sx,
            ly: -self.ly / self.sy,
        }
    }

    /// The parameters of `to_matrix(self) * to_matrix(other)`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            sx: self.sx * other.sx,
            sy: self.sy * other.sy,
            lx: self.lx * other.sx + other.lx,
            ly: self.ly * other.sy + other.ly,
        }
    }

    /// Jacobian of [`HomographyParams::invert`] with respect to `(s_x, s_y, l_x, l_y)`.
    ///
    /// Row `i` holds the derivatives of inverse component `i`.
    pub fn invert_jacobian(&self) -> [[f64; 4]; 4] {
        let (sx, sy, lx, ly) = (self.sx, self.sy, self.lx, self.ly);
        [
            [-1.0 / (sx * sx), 0.0, 0.0, 0.0],
            [0.0, -1.0 / (sy * sy), 0.0, 0.0],
            [lx / (sx * sx), 0.0, -1.0 / sx, 0.0],
            [0.0, ly / (sy * sy), 0.0, -1.0 / sy],
        ]
    }

    /// Clamps both scales into `[lo, hi]`.
    pub fn clamp_scales(&self, lo: f64, hi: f64) -> Self {
        Self {
            sx: self.sx.clamp(lo, hi),
            sy: self.sy.clamp(lo, hi),
            ..*self
        }
    }

    /// Euclidean distance between parameter vectors.
    pub fn distance(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One homography taking `p` to `d`, namely `(d_x / p_x, d_y / p_y, 0, 0)`.
///
/// Both coordinates of `p` must be away from zero, and the ratios must be
/// positive to stay inside the positive-scale family.
pub fn solve_point_mapping(p: Point2, d: Point2) -> Result<HomographyParams> {
    if p.x.abs() <= EPS || p.y.abs() <= EPS {
        return Err(Error::UnmappablePoint { x: p.x, y: p.y });
    }
    let sx = d.x / p.x;
    let sy = d.y / p.y;
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::SignDegenerate {
            px: p.x,
            py: p.y,
            dx: d.x,
            dy: d.y,
        });
    }
    HomographyParams::new(sx, sy, 0.0, 0.0)
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    /// Derivative of the continuous source pixel coordinates with respect to
    /// `(s_x, s_y, l_x, l_y)`; zero along an axis where the sample was clamped.
    dpx: [f64; 4],
    dpy: [f64; 4],
}

/// Precomputed bilinear sampling locations for warping an `h x w` map by one homography.
#[derive(Clone, Debug)]
pub struct SamplingGrid {
    height: usize,
    width: usize,
    params: HomographyParams,
    samples: Vec<Option<Sample>>,
}

impl SamplingGrid {
    /// Builds the grid that samples the source at `params^-1 q` for every output pixel `q`.
    pub fn new(params: &HomographyParams, height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::Shape(format!(
                "warp needs at least 2x2 pixels, got {height}x{width}"
            )));
        }
        let HomographyParams { sx, sy, lx, ly } = *params;
        let half_w = width as f64 / 2.0;
        let half_h = height as f64 / 2.0;
        let mut samples = Vec::with_capacity(height * width);
        for i in 0..height {
            let qy = pixel_to_normalized(i as f64, height);
            for j in 0..width {
                let qx = pixel_to_normalized(j as f64, width);
                let a = qx / sx;
                let b = qy / sy;
                let den = 1.0 - lx * a - ly * b;
                // Non-positive denominators lie beyond the projective horizon.
                if den <= EPS {
                    samples.push(None);
                    continue;
                }
                let ux = a / den;
                let uy = b / den;
                if !(-1.0..=1.0).contains(&ux) || !(-1.0..=1.0).contains(&uy) {
                    samples.push(None);
                    continue;
                }
                let d2 = den * den;
                let dux = [
                    -a * (den + lx * a) / (sx * d2),
                    -a * ly * b / (sy * d2),
                    a * a / d2,
                    a * b / d2,
                ];
                let duy = [
                    -b * lx * a / (sx * d2),
                    -b * (den + ly * b) / (sy * d2),
                    a * b / d2,
                    b * b / d2,
                ];
                let (x0, fx, x_free) = cell(normalized_to_pixel(ux, width), width);
                let (y0, fy, y_free) = cell(normalized_to_pixel(uy, height), height);
                let scale = |d: [f64; 4], k: f64, free: bool| {
                    if free {
                        d.map(|v| v * k)
                    } else {
                        [0.0; 4]
                    }
                };
                samples.push(Some(Sample {
                    x0,
                    y0,
                    fx,
                    fy,
                    dpx: scale(dux, half_w, x_free),
                    dpy: scale(duy, half_h, y_free),
                }));
            }
        }
        Ok(Self {
            height,
            width,
            params: *params,
            samples,
        })
    }

    pub fn params(&self) -> &HomographyParams {
        &self.params
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.samples.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_some()).count()
    }

    fn check_extent<T: Real>(&self, t: &Tensor<T>) -> Result<()> {
        if t.height() != self.height || t.width() != self.width {
            return Err(Error::Shape(format!(
                "grid is {}x{} but tensor is {}x{}",
                self.height,
                self.width,
                t.height(),
                t.width()
            )));
        }
        Ok(())
    }

    pub fn sample<T: Real>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_extent(input)?;
        let [n, c, h, w] = input.shape();
        let mut out = Tensor::zeros([n, c, h, w]);
        let src = input.data();
        let dst = out.data_mut();
        let plane = h * w;
        for (pix, s) in self.samples.iter().enumerate() {
            let Some(s) = s else { continue };
            let (w00, w01, w10, w11) = weights::<T>(s);
            let i00 = s.y0 * w + s.x0;
            for map in 0..n * c {
                let base = map * plane;
                let p = &src[base + i00..];
                dst[base + pix] = w00 * p[0] + w01 * p[1] + w10 * p[w] + w11 * p[w + 1];
            }
        }
        Ok(out)
    }

    /// Back-propagates `grad_out` through [`SamplingGrid::sample`].
    ///
    /// Returns the gradient with respect to the input (when requested) and with
    /// respect to the four homography parameters.
    pub fn backward<T: Real>(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, [f64; 4])> {
        self.check_extent(input)?;
        if grad_out.shape() != input.shape() {
            return Err(Error::Shape("warp gradient shape differs from input".into()));
        }
        let [n, c, h, w] = input.shape();
        let plane = h * w;
        let src = input.data();
        let g = grad_out.data();
        let mut grad_in = need_input_grad.then(|| Tensor::<T>::zeros([n, c, h, w]));
        let mut grad_p = [0.0f64; 4];
        for (pix, s) in self.samples.iter().enumerate() {
            let Some(s) = s else { continue };
            let (w00, w01, w10, w11) = weights::<T>(s);
            let i00 = s.y0 * w + s.x0;
            let (fx, fy) = (T::of(s.fx), T::of(s.fy));
            let one = T::one();
            let mut gx = T::zero();
            let mut gy = T::zero();
            for map in 0..n * c {
                let base = map * plane;
                let go = g[base + pix];
                if go == T::zero() {
                    continue;
                }
                let p = &src[base + i00..];
                let (v00, v01, v10, v11) = (p[0], p[1], p[w], p[w + 1]);
                gx += go * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += go * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                if let Some(gi) = grad_in.as_mut() {
                    let d = &mut gi.data_mut()[base + i00..];
                    d[0] += w00 * go;
                    d[1] += w01 * go;
                    d[w] += w10 * go;
                    d[w + 1] += w11 * go;
                }
            }
            let (gx, gy) = (gx.f64(), gy.f64());
            for k in 0..4 {
                grad_p[k] += gx * s.dpx[k] + gy * s.dpy[k];
            }
        }
        Ok((grad_in, grad_p))
    }
}

/// Bilinear cell for a continuous pixel coordinate, clamped to the border.
///
/// Returns the left index, the fractional offset and whether the coordinate was
/// interior (so its derivative flows).
fn cell(p: f64, extent: usize) -> (usize, f64, bool) {
    let max = (extent - 1) as f64;
    let (pc, free) = if p < 0.0 {
        (0.0, false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    };
    let i0 = (pc.floor() as usize).min(extent - 2);
    (i0, pc - i0 as f64, free)
}

#[inline]
fn weights<T: Real>(s: &Sample) -> (T, T, T, T) {
    let (fx, fy) = (s.fx, s.fy);
    (
        T::of((1.0 - fx) * (1.0 - fy)),
        T::of(fx * (1.0 - fy)),
        T::of((1.0 - fx) * fy),
        T::of(fx * fy),
    )
}

/// Warped feature maps plus the per-pixel validity of each sample.
#[derive(Clone, Debug)]
pub struct WarpResult<T = f32> {
    pub data: Tensor<T>,
    /// Row-major `height x width` mask shared by every batch item and channel.
    pub valid: Vec<bool>,
}

/// Warps every map of `image` by `params` (output at `q` samples input at `params^-1 q`).
pub fn warp<T: Real>(image: &Tensor<T>, params: &HomographyParams) -> Result<WarpResult<T>> {
    let grid = SamplingGrid::new(params, image.height(), image.width())?;
    Ok(WarpResult {
        data: grid.sample(image)?,
        valid: grid.valid_mask(),
    })
}

/// Gradient of `sum(grad_out * warp(image, params))` with respect to the parameters.
pub fn warp_param_gradient<T: Real>(
    image: &Tensor<T>,
    params: &HomographyParams,
    grad_out: &Tensor<T>,
) -> Result<[f64; 4]> {
    let grid = SamplingGrid::new(params, image.height(), image.width())?;
    Ok(grid.backward(image, grad_out, false)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(sx: f64, sy: f64, lx: f64, ly: f64) -> HomographyParams {
        HomographyParams::new(sx, sy, lx, ly).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 1, h, w], |_, _, _, x| x as f64)
    }

    fn smooth(h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn([1, c, h, w], |_, ch, y, x| {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            (3.0 * u + ch as f64).sin() * (2.0 * v).cos() + 0.5 * u * v
        })
    }

    #[test]
    fn matrix_layout() {
        assert_eq!(HomographyParams::IDENTITY.to_matrix(), Matrix3::identity());
        assert_eq!(
            hp(2.0, 3.0, 0.0, 0.0).to_matrix(),
            Matrix3::from_diagonal(&nalgebra::Vector3::new(2.0, 3.0, 1.0))
        );
        let m = hp(1.0, 1.0, 0.5, 0.0).to_matrix();
        assert_eq!(m, Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.5, 0.0, 1.0));
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(HomographyParams::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(HomographyParams::new(1.0, -2.0, 0.0, 0.0).is_err());
        assert!(HomographyParams::new(f64::NAN, 1.0, 0.0, 0.0).is_err());
        assert!(HomographyParams::new(1.0, 1.0, f64::INFINITY, 0.0).is_err());
        assert!(serde_json::from_str::<HomographyParams>("[1.0, 0.0, 0.0, 0.0]").is_err());
    }

    #[test]
    fn serializes_as_flat_record() {
        let p = hp(1.5, 0.5, -0.25, 0.125);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[1.5,0.5,-0.25,0.125]");
        assert_eq!(serde_json::from_str::<HomographyParams>(&s).unwrap(), p);
    }

    #[test]
    fn apply_point_examples() {
        let q = HomographyParams::IDENTITY
            .apply_point(Point2::new(0.3, -0.7))
            .unwrap();
        assert_eq!(q, Point2::new(0.3, -0.7));
        let q = hp(1.0, 1.0, 0.5, 0.0).apply_point(Point2::new(1.0, 0.0)).unwrap();
        assert!((q.x - 2.0 / 3.0).abs() < 1e-15 && q.y == 0.0);
        let q = hp(2.0, 3.0, 0.0, 0.0).apply_point(Point2::new(1.0, 1.0)).unwrap();
        assert_eq!(q, Point2::new(2.0, 3.0));
    }

    #[test]
    fn apply_point_degenerate() {
        let err = hp(1.0, 1.0, -1.0, 0.0)
            .apply_point(Point2::new(1.0, 0.5))
            .unwrap_err();
        assert!(matches!(err, Error::DegeneratePoint { .. }));
    }

    #[test]
    fn solve_point_mapping_examples() {
        let p = solve_point_mapping(Point2::new(1.0, 1.0), Point2::new(2.0, 3.0)).unwrap();
        assert_eq!(p, hp(2.0, 3.0, 0.0, 0.0));
        let p = solve_point_mapping(Point2::new(0.5, 0.5), Point2::new(0.5, 0.5)).unwrap();
        assert_eq!(p, HomographyParams::IDENTITY);
        assert!(matches!(
            solve_point_mapping(Point2::new(1.0, 1.0), Point2::new(-1.0, 1.0)),
            Err(Error::SignDegenerate { .. })
        ));
        assert!(matches!(
            solve_point_mapping(Point2::new(0.0, 1.0), Point2::new(1.0, 1.0)),
            Err(Error::UnmappablePoint { .. })
        ));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(HomographyParams::IDENTITY.invert(), HomographyParams::IDENTITY);
        assert_eq!(hp(2.0, 4.0, 0.0, 0.0).invert(), hp(0.5, 0.25, 0.0, 0.0));
        let p = hp(1.0, 1.0, 0.5, -0.2);
        assert_eq!(p.invert(), hp(1.0, 1.0, -0.5, 0.2));
        let prod = p.invert().to_matrix() * p.to_matrix();
        assert!((prod - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn compose_examples() {
        let p = hp(1.7, 0.6, 0.3, -0.4);
        let id = p.compose(&p.invert());
        assert!(id.distance(&HomographyParams::IDENTITY) < 1e-15);
        assert_eq!(
            hp(2.0, 1.0, 0.0, 0.0).compose(&hp(3.0, 1.0, 0.0, 0.0)),
            hp(6.0, 1.0, 0.0, 0.0)
        );
        let c = hp(1.0, 1.0, 0.1, 0.0).compose(&hp(2.0, 1.0, 0.2, 0.0));
        let full = hp(1.0, 1.0, 0.1, 0.0).to_matrix() * hp(2.0, 1.0, 0.2, 0.0).to_matrix();
        assert!((c.to_matrix() - full).abs().max() < 1e-15);
        assert!(c.distance(&hp(2.0, 1.0, 0.4, 0.0)) < 1e-15);
    }

    #[test]
    fn invert_jacobian_matches_finite_differences() {
        let p = [1.3, 0.7, 0.2, -0.35];
        let jac = HomographyParams::from_array(p).unwrap().invert_jacobian();
        let h = 1e-6;
        for k in 0..4 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let ia = HomographyParams::from_array(a).unwrap().invert().to_array();
            let ib = HomographyParams::from_array(b).unwrap().invert().to_array();
            for i in 0..4 {
                let fd = (ia[i] - ib[i]) / (2.0 * h);
                assert!((fd - jac[i][k]).abs() < 1e-7, "d inv[{i}]/d p[{k}]");
            }
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = smooth(9, 13, 2);
        let r = warp(&img, &HomographyParams::IDENTITY).unwrap();
        assert!(r.valid.iter().all(|&v| v));
        for (a, b) in r.data.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::<f64>::filled([2, 3, 12, 10], 0.37);
        for p in [hp(1.4, 0.6, 0.3, -0.2), hp(0.5, 2.0, -0.5, 0.5), hp(2.0, 2.0, 0.0, 0.4)] {
            let r = warp(&img, &p).unwrap();
            let plane = 12 * 10;
            for (i, v) in r.data.data().iter().enumerate() {
                if r.valid[i % plane] {
                    assert!((v - 0.37).abs() < 1e-6);
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn zoom_in_samples_center() {
        // Scale 2 shows the central half of the input stretched to full size.
        let img = ramp(8, 8);
        let r = warp(&img, &hp(2.0, 2.0, 0.0, 0.0)).unwrap();
        // Output pixel 0 sits at q = -7/8, sampling u = -7/16 -> pixel 1.75.
        assert!((r.data.at(0, 0, 0, 0) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn degenerate_homography_invalidates_everything() {
        // A tiny scale samples far outside the input everywhere.
        let img = smooth(8, 8, 1);
        let r = warp(&img, &hp(0.01, 0.01, 0.0, 0.0)).unwrap();
        assert!(r.valid.iter().all(|&v| !v));
        assert!(r.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_parameter_gradient_matches_central_differences() {
        let img = ramp(16, 16);
        let base = [1.5, 1.0, 0.0, 0.0];
        let ones = Tensor::<f64>::filled([1, 1, 16, 16], 1.0);
        let analytic =
            warp_param_gradient(&img, &HomographyParams::from_array(base).unwrap(), &ones).unwrap();
        let h = 1e-3;
        for k in 0..4 {
            let mut a = base;
            let mut b = base;
            a[k] += h;
            b[k] -= h;
            let fa = warp(&img, &HomographyParams::from_array(a).unwrap()).unwrap().data.sum();
            let fb = warp(&img, &HomographyParams::from_array(b).unwrap()).unwrap().data.sum();
            let fd = (fa - fb) / (2.0 * h);
            let scale = fd.abs().max(analytic[k].abs()).max(1e-8);
            assert!(
                (fd - analytic[k]).abs() / scale < 1e-4 || (fd - analytic[k]).abs() < 1e-9,
                "param {k}: fd {fd} analytic {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn input_gradient_is_the_adjoint() {
        let img = smooth(10, 10, 2);
        let p = hp(1.2, 0.8, 0.2, -0.1);
        let grid = SamplingGrid::new(&p, 10, 10).unwrap();
        let g = Tensor::from_fn([1, 2, 10, 10], |_, c, y, x| ((c * 31 + y * 7 + x) % 5) as f64 - 2.0);
        let (gi, _) = grid.backward(&img, &g, true).unwrap();
        let gi = gi.unwrap();
        // <g, W x> == <W^T g, x> for the linear sampling operator W.
        let lhs: f64 = grid
            .sample(&img)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = gi.data().iter().zip(img.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
