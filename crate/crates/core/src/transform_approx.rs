//! Approximating dense geometric mappings with a small set of homographies plus
//! a per-cell selection map.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalized_to_pixel, pixel_to_normalized, solve_point_mapping, HomographyParams, Point2, EPS};

type MapFn = dyn Fn(Point2) -> Point2 + Send + Sync;

/// A deterministic point-to-point mapping in normalized coordinates.
#[derive(Clone)]
pub struct DenseMapping {
    name: String,
    params: Vec<(String, f64)>,
    map: Arc<MapFn>,
}

impl fmt::Debug for DenseMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseMapping")
            .field("name", &self.name)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl DenseMapping {
    pub fn new(
        name: impl Into<String>,
        params: Vec<(String, f64)>,
        map: impl Fn(Point2) -> Point2 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            params,
            map: Arc::new(map),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    pub fn apply(&self, q: Point2) -> Point2 {
        (self.map)(q)
    }

    pub fn identity() -> Self {
        Self::new("identity", Vec::new(), |q| q)
    }

    /// The mapping realized by one homography of the family; `q` must stay off its horizon.
    pub fn from_homography(p: HomographyParams) -> Self {
        let a = p.to_array();
        let params = ["sx", "sy", "lx", "ly"]
            .iter()
            .zip(a)
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self::new("homography", params, move |q| {
            let w = p.denominator(q);
            Point2 {
                x: p.sx() * q.x / w,
                y: p.sy() * q.y / w,
            }
        })
    }
}

fn check_fov(name: &str, deg: f64) -> Result<()> {
    if !(deg.is_finite() && deg > 0.0 && deg < 180.0) {
        return Err(Error::InvalidParameter(format!("{name} = {deg} must lie in (0, 180) degrees")));
    }
    Ok(())
}

/// Maps destination pinhole coordinates to source coordinates through viewing angles:
/// `x -> tan(x * dst_fov_x / 2) / tan(src_fov_x / 2)`, likewise in `y`.
///
/// Points far from the center are compressed more strongly than points near it.
pub fn spherical_fov_mapping(src_fov_x: f64, src_fov_y: f64, dst_fov_x: f64, dst_fov_y: f64) -> Result<DenseMapping> {
    check_fov("src_fov_x", src_fov_x)?;
    check_fov("src_fov_y", src_fov_y)?;
    check_fov("dst_fov_x", dst_fov_x)?;
    check_fov("dst_fov_y", dst_fov_y)?;
    let (hx, hy) = (dst_fov_x.to_radians() / 2.0, dst_fov_y.to_radians() / 2.0);
    let (tx, ty) = ((src_fov_x.to_radians() / 2.0).tan(), (src_fov_y.to_radians() / 2.0).tan());
    let params = vec![
        ("src_fov_x".to_string(), src_fov_x),
        ("src_fov_y".to_string(), src_fov_y),
        ("dst_fov_x".to_string(), dst_fov_x),
        ("dst_fov_y".to_string(), dst_fov_y),
    ];
    Ok(DenseMapping::new("spherical_fov", params, move |q| Point2 {
        x: (q.x * hx).tan() / tx,
        y: (q.y * hy).tan() / ty,
    }))
}

/// Pinhole camera pitched by `tilt_deg` (positive looks down) with vertical and horizontal
/// field of view `fov_deg`, then scaled by `zoom`.
///
/// Returns, for each pixel of the tilted view, where it sees the untilted image plane.
pub fn viewpoint_mapping(tilt_deg: f64, fov_deg: f64, zoom: f64) -> Result<DenseMapping> {
    check_fov("fov_deg", fov_deg)?;
    if !(tilt_deg.is_finite() && tilt_deg.abs() < fov_deg / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "tilt {tilt_deg} must be smaller than half the field of view"
        )));
    }
    if !(zoom.is_finite() && zoom > 0.0) {
        return Err(Error::InvalidParameter(format!("zoom = {zoom} must be positive")));
    }
    let f = 1.0 / (fov_deg.to_radians() / 2.0).tan();
    let (s, c) = tilt_deg.to_radians().sin_cos();
    let params = vec![
        ("tilt_deg".to_string(), tilt_deg),
        ("fov_deg".to_string(), fov_deg),
        ("zoom".to_string(), zoom),
    ];
    Ok(DenseMapping::new("viewpoint", params, move |q| {
        let (x, y) = (q.x / zoom, q.y / zoom);
        let z = c * f - s * y;
        Point2 {
            x: f * x / z,
            y: f * (c * y + s * f) / z,
        }
    }))
}

/// Regular grid of cell centers over `[-1, 1]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("grid extent must be positive".into()));
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, row: usize, col: usize) -> Point2 {
        Point2 {
            x: pixel_to_normalized(col as f64, self.width),
            y: pixel_to_normalized(row as f64, self.height),
        }
    }

    /// Cell centers in row-major order.
    pub fn points(&self) -> Vec<Point2> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.point(r, c))
            .collect()
    }

    /// Odd extents put a row or column of centers on an axis.
    pub fn avoids_axes(&self) -> bool {
        self.height.is_multiple_of(2) && self.width.is_multiple_of(2)
    }

    fn require_axis_free(&self) -> Result<()> {
        if self.avoids_axes() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "a {}x{} grid has cell centers on an axis; use even extents",
                self.height, self.width
            )))
        }
    }
}

/// Per-cell index (0-based) of the homography remapping that cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMap {
    pub grid: Grid,
    pub indices: Vec<usize>,
}

impl SelectionMap {
    pub fn uniform(grid: Grid, index: usize) -> Self {
        Self {
            grid,
            indices: vec![index; grid.len()],
        }
    }

    pub fn counts(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for &i in &self.indices {
            out[i] += 1;
        }
        out
    }
}

/// One homography per grid cell, each reproducing the mapping exactly at its cell center.
#[derive(Clone, Debug, PartialEq)]
pub struct Emulation {
    pub params: Vec<HomographyParams>,
    pub selection: SelectionMap,
}

pub fn pixelwise_emulation(mapping: &DenseMapping, grid: Grid) -> Result<Emulation> {
    grid.require_axis_free()?;
    let mut params = Vec::with_capacity(grid.len());
    for row in 0..grid.height {
        for col in 0..grid.width {
            let q = grid.point(row, col);
            let p = solve_point_mapping(q, mapping.apply(q)).map_err(|e| Error::Cell {
                row,
                col,
                source: Box::new(e),
            })?;
            params.push(p);
        }
    }
    Ok(Emulation {
        params,
        selection: SelectionMap {
            grid,
            indices: (0..grid.len()).collect(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Cap on selection/refit alternations.
    pub rounds: usize,
    /// Damped Gauss-Newton steps per refit.
    pub refit_steps: usize,
    /// Stop once a round improves rmse by less than this many pixels.
    pub tolerance_px: f64,
    pub reference_resolution: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            refit_steps: 200,
            tolerance_px: 1e-6,
            reference_resolution: 256.0,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 || !(self.reference_resolution > 0.0) || !(self.tolerance_px >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid fit settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mapping: String,
    pub params: Vec<HomographyParams>,
    pub selection: SelectionMap,
    pub rmse: f64,
    pub max_error: f64,
    /// Alternation rounds run by the final stage.
    pub iterations: usize,
    pub reference_resolution: f64,
}

/// Sampled mapping: the source/target pair at every grid cell.
struct Samples {
    q: Vec<Point2>,
    d: Vec<Point2>,
}

impl Samples {
    fn new(mapping: &DenseMapping, grid: Grid) -> Result<Self> {
        let q = grid.points();
        let d: Vec<Point2> = q.iter().map(|&p| mapping.apply(p)).collect();
        if d.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "mapping `{}` is not finite on the grid",
                mapping.name()
            )));
        }
        Ok(Self { q, d })
    }
}

/// Squared normalized error of `p` at one cell; infinite past the horizon.
fn sq_error(p: &HomographyParams, q: Point2, d: Point2) -> f64 {
    let w = p.denominator(q);
    if w.abs() <= EPS {
        return f64::INFINITY;
    }
    let (ex, ey) = (p.sx() * q.x / w - d.x, p.sy() * q.y / w - d.y);
    ex * ex + ey * ey
}

fn scale_to_px(reference_resolution: f64) -> f64 {
    reference_resolution / 2.0
}

/// Per-cell remap error of the selected homographies, in pixels at `reference_resolution`.
pub fn remap_errors(
    params: &[HomographyParams],
    selection: &SelectionMap,
    mapping: &DenseMapping,
    reference_resolution: f64,
) -> Result<Vec<f64>> {
    let grid = selection.grid;
    if selection.indices.len() != grid.len() {
        return Err(Error::Shape("selection map does not cover its grid".into()));
    }
    if let Some(&bad) = selection.indices.iter().find(|&&i| i >= params.len()) {
        return Err(Error::InvalidParameter(format!(
            "selection index {bad} outside a set of {}",
            params.len()
        )));
    }
    let k = scale_to_px(reference_resolution);
    Ok(grid
        .points()
        .iter()
        .zip(&selection.indices)
        .map(|(&q, &i)| sq_error(&params[i], q, mapping.apply(q)).sqrt() * k)
        .collect())
}

/// Root-mean-square and maximum of [`remap_errors`].
pub fn remap_error(
    params: &[HomographyParams],
    selection: &SelectionMap,
    mapping: &DenseMapping,
    reference_resolution: f64,
) -> Result<(f64, f64)> {
    let errors = remap_errors(params, selection, mapping, reference_resolution)?;
    Ok(summarize(&errors))
}

fn summarize(errors: &[f64]) -> (f64, f64) {
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    (mean_sq.sqrt(), errors.iter().cloned().fold(0.0, f64::max))
}

/// Argmin selection per cell; ties go to the lowest index.
fn reselect(params: &[HomographyParams], s: &Samples, indices: &mut [usize]) {
    for (c, slot) in indices.iter_mut().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in params.iter().enumerate() {
            let e = sq_error(p, s.q[c], s.d[c]);
            if e < best.0 {
                best = (e, i);
            }
        }
        *slot = best.1;
    }
}

fn total_sq(params: &[HomographyParams], s: &Samples, indices: &[usize]) -> f64 {
    indices
        .iter()
        .enumerate()
        .map(|(c, &i)| sq_error(&params[i], s.q[c], s.d[c]))
        .sum()
}

fn rmse_px(params: &[HomographyParams], s: &Samples, indices: &[usize], config: &FitConfig) -> f64 {
    (total_sq(params, s, indices) / indices.len() as f64).sqrt() * scale_to_px(config.reference_resolution)
}

/// Least-squares refit of one homography to `cells`, accepting only steps that lower the cost.
fn refit(p: HomographyParams, s: &Samples, cells: &[usize], steps: usize) -> HomographyParams {
    if cells.is_empty() {
        return p;
    }
    let cost = |p: &HomographyParams| cells.iter().map(|&c| sq_error(p, s.q[c], s.d[c])).sum::<f64>();
    let mut cur = p;
    let mut cur_cost = cost(&cur);
    let mut damping = 1e-3;
    for _ in 0..steps {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for &c in cells {
            let (q, d) = (s.q[c], s.d[c]);
            let w = cur.denominator(q);
            let (ux, uy) = (cur.sx() * q.x / w, cur.sy() * q.y / w);
            let jx = Vector4::new(q.x / w, 0.0, -ux * q.x / w, -ux * q.y / w);
            let jy = Vector4::new(0.0, q.y / w, -uy * q.x / w, -uy * q.y / w);
            jtj += jx * jx.transpose() + jy * jy.transpose();
            jtr += jx * (ux - d.x) + jy * (uy - d.y);
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-jtr)) else {
                damping *= 10.0;
                continue;
            };
            let v = cur.to_array();
            let cand = HomographyParams::from_array([v[0] + delta[0], v[1] + delta[1], v[2] + delta[2], v[3] + delta[3]]);
            if let Ok(cand) = cand {
                let c = cost(&cand);
                if c < cur_cost {
                    let gain = cur_cost - c;
                    cur = cand;
                    cur_cost = c;
                    damping = (damping * 0.3).max(1e-12);
                    accepted = gain > 1e-15 * cur_cost.max(1e-300);
                    break;
                }
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    cur
}

struct Stage {
    params: Vec<HomographyParams>,
    indices: Vec<usize>,
    rmse: f64,
    rounds: usize,
}

/// Alternates argmin reselection and per-homography refits, finishing on a reselection.
fn alternate(mut params: Vec<HomographyParams>, s: &Samples, config: &FitConfig) -> Stage {
    let mut indices = vec![0; s.q.len()];
    reselect(&params, s, &mut indices);
    let mut rmse = rmse_px(&params, s, &indices, config);
    let mut rounds = 0;
    while rounds < config.rounds {
        rounds += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let cells: Vec<usize> = (0..indices.len()).filter(|&c| indices[c] == i).collect();
            *p = refit(*p, s, &cells, config.refit_steps);
        }
        reselect(&params, s, &mut indices);
        let next = rmse_px(&params, s, &indices, config);
        let improvement = rmse - next;
        rmse = next;
        if improvement < config.tolerance_px {
            break;
        }
    }
    Stage {
        params,
        indices,
        rmse,
        rounds,
    }
}

fn report(mapping: &DenseMapping, grid: Grid, stage: Stage, s: &Samples, config: &FitConfig) -> FitReport {
    let k = scale_to_px(config.reference_resolution);
    let errors: Vec<f64> = stage
        .indices
        .iter()
        .enumerate()
        .map(|(c, &i)| sq_error(&stage.params[i], s.q[c], s.d[c]).sqrt() * k)
        .collect();
    let (rmse, max_error) = summarize(&errors);
    FitReport {
        mapping: mapping.name().to_string(),
        params: stage.params,
        selection: SelectionMap {
            grid,
            indices: stage.indices,
        },
        rmse,
        max_error,
        iterations: stage.rounds,
        reference_resolution: config.reference_resolution,
    }
}

/// Fits starting from `initial` (selection then alternation); never worse than `initial` itself.
pub fn fit_homography_set_from(
    mapping: &DenseMapping,
    initial: Vec<HomographyParams>,
    grid: Grid,
    config: &FitConfig,
) -> Result<FitReport> {
    config.validate()?;
    grid.require_axis_free()?;
    if initial.is_empty() {
        return Err(Error::InvalidParameter("cannot fit an empty homography set".into()));
    }
    let s = Samples::new(mapping, grid)?;
    let stage = alternate(initial, &s, config);
    Ok(report(mapping, grid, stage, &s, config))
}

/// Fits `n` homographies, growing the set one element at a time from `n = 1`.
pub fn fit_homography_set(mapping: &DenseMapping, n: usize, grid: Grid, config: &FitConfig) -> Result<FitReport> {
    fit_nested(mapping, n, grid, config)?
        .pop()
        .ok_or_else(|| Error::InvalidParameter("n must be at least 1".into()))
}

/// Reports for `1..=n_max` homographies, each stage seeded with the previous solution.
///
/// A new element starts from a fit to the currently worst-approximated cells; several
/// candidate seeds are tried and the best resulting stage is kept, so the error
/// sequence is non-increasing.
pub fn fit_nested(mapping: &DenseMapping, n_max: usize, grid: Grid, config: &FitConfig) -> Result<Vec<FitReport>> {
    config.validate()?;
    grid.require_axis_free()?;
    if n_max == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let s = Samples::new(mapping, grid)?;
    let mut out = Vec::with_capacity(n_max);
    let all: Vec<usize> = (0..s.q.len()).collect();
    let first = refit(HomographyParams::IDENTITY, &s, &all, config.refit_steps);
    let mut stage = alternate(vec![first], &s, config);
    out.push(report(mapping, grid, clone_stage(&stage), &s, config));
    for _ in 1..n_max {
        let errors: Vec<f64> = (0..s.q.len())
            .map(|c| sq_error(&stage.params[stage.indices[c]], s.q[c], s.d[c]))
            .collect();
        let mut order = all.clone();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let mut best: Option<Stage> = None;
        let mut seeds = vec![HomographyParams::IDENTITY];
        // Worst cells overall and within each half-plane and quadrant, which lets the
        // seeds break the symmetry of symmetric mappings.
        let regions: [fn(Point2) -> bool; 9] = [
            |_| true,
            |q| q.x > 0.0,
            |q| q.x < 0.0,
            |q| q.y > 0.0,
            |q| q.y < 0.0,
            |q| q.x > 0.0 && q.y > 0.0,
            |q| q.x < 0.0 && q.y > 0.0,
            |q| q.x > 0.0 && q.y < 0.0,
            |q| q.x < 0.0 && q.y < 0.0,
        ];
        for region in regions {
            let ranked: Vec<usize> = order.iter().copied().filter(|&c| region(s.q[c])).collect();
            for frac in [0.05, 0.15, 0.3, 0.5] {
                let k = ((ranked.len() as f64 * frac).ceil() as usize).clamp(1, ranked.len());
                let start = stage.params[stage.indices[ranked[0]]];
                seeds.push(refit(start, &s, &ranked[..k], config.refit_steps));
            }
        }
        for seed in seeds {
            let mut params = stage.params.clone();
            params.push(seed);
            let cand = alternate(params, &s, config);
            if best.as_ref().is_none_or(|b| cand.rmse < b.rmse) {
                best = Some(cand);
            }
        }
        stage = best.expect("at least one seed");
        out.push(report(mapping, grid, clone_stage(&stage), &s, config));
    }
    Ok(out)
}

fn clone_stage(s: &Stage) -> Stage {
    Stage {
        params: s.params.clone(),
        indices: s.indices.clone(),
        rmse: s.rmse,
        rounds: s.rounds,
    }
}

/// Side-by-side rendering of a checkerboard remapped by the exact mapping (left) and by the
/// fitted homographies with their selection (right).
pub fn remap_visualization(mapping: &DenseMapping, report: &FitReport, size: u32) -> image::RgbImage {
    let grid = report.selection.grid;
    let pattern = |p: Point2| -> [u8; 3] {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return [0, 0, 0];
        }
        let (cx, cy) = ((p.x * 4.0).floor() as i64, (p.y * 4.0).floor() as i64);
        let on = (cx + cy).rem_euclid(2) == 0;
        let inside = p.x.abs() <= 1.0 && p.y.abs() <= 1.0;
        match (on, inside) {
            (true, true) => [230, 230, 230],
            (false, true) => [40, 40, 40],
            (true, false) => [150, 110, 110],
            (false, false) => [60, 30, 30],
        }
    };
    let mut img = image::RgbImage::new(2 * size, size);
    for y in 0..size {
        for x in 0..size {
            let q = Point2 {
                x: pixel_to_normalized(x as f64, size as usize),
                y: pixel_to_normalized(y as f64, size as usize),
            };
            img.put_pixel(x, y, image::Rgb(pattern(mapping.apply(q))));
            let col = normalized_to_pixel(q.x, grid.width).round().clamp(0.0, grid.width as f64 - 1.0) as usize;
            let row = normalized_to_pixel(q.y, grid.height).round().clamp(0.0, grid.height as f64 - 1.0) as usize;
            let h = report.params[report.selection.indices[row * grid.width + col]];
            let approx = h.apply_point(q).unwrap_or(Point2 { x: f64::NAN, y: f64::NAN });
            img.put_pixel(size + x, y, image::Rgb(pattern(approx)));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere() -> DenseMapping {
        spherical_fov_mapping(50.0, 26.0, 90.0, 34.0).unwrap()
    }

    #[test]
    fn spherical_mapping_shape() {
        let m = sphere();
        let o = m.apply(Point2 { x: 0.0, y: 0.0 });
        assert_eq!((o.x, o.y), (0.0, 0.0));
        let a = m.apply(Point2 { x: 0.6, y: -0.3 });
        let b = m.apply(Point2 { x: -0.6, y: -0.3 });
        assert_eq!(a.x, -b.x);
        assert_eq!(a.y, b.y);
        // Source extent consumed per unit of destination extent grows towards the border.
        let ratio = |x: f64| m.apply(Point2 { x, y: 0.1 }).x / x;
        assert!(ratio(0.9) > ratio(0.1));
        assert!(spherical_fov_mapping(0.0, 26.0, 90.0, 34.0).is_err());
        assert!(spherical_fov_mapping(50.0, 26.0, 180.0, 34.0).is_err());
    }

    #[test]
    fn viewpoint_mapping_is_a_pitch() {
        let m = viewpoint_mapping(0.0, 60.0, 1.0).unwrap();
        let p = m.apply(Point2 { x: 0.4, y: -0.2 });
        assert!((p.x - 0.4).abs() < 1e-12 && (p.y + 0.2).abs() < 1e-12);
        let m = viewpoint_mapping(10.0, 60.0, 1.0).unwrap();
        let f = 1.0 / 30f64.to_radians().tan();
        let c = m.apply(Point2 { x: 0.0, y: 0.0 });
        assert!((c.y - f * 10f64.to_radians().tan()).abs() < 1e-12);
        assert!(viewpoint_mapping(40.0, 60.0, 1.0).is_err());
    }

    #[test]
    fn pixelwise_emulation_examples() {
        let e = pixelwise_emulation(&DenseMapping::identity(), Grid::new(4, 4).unwrap()).unwrap();
        assert_eq!(e.params.len(), 16);
        assert!(e.params.iter().all(|p| p.distance(&HomographyParams::IDENTITY) < 1e-12));
        let half = DenseMapping::new("half", Vec::new(), |q| Point2 { x: 0.5 * q.x, y: 0.5 * q.y });
        let e = pixelwise_emulation(&half, Grid::new(8, 8).unwrap()).unwrap();
        assert!(e.params.iter().all(|p| p.to_array() == [0.5, 0.5, 0.0, 0.0]));
        let e = pixelwise_emulation(&sphere(), Grid::new(8, 8).unwrap()).unwrap();
        let (rmse, max) = remap_error(&e.params, &e.selection, &sphere(), 256.0).unwrap();
        assert!(rmse <= max && max < 1e-9);
        assert!(pixelwise_emulation(&half, Grid::new(3, 4).unwrap()).is_err());
    }

    #[test]
    fn pixelwise_emulation_names_the_failing_cell() {
        let flip = DenseMapping::new("flip", Vec::new(), |q| Point2 { x: -q.x, y: q.y });
        match pixelwise_emulation(&flip, Grid::new(2, 2).unwrap()) {
            Err(Error::Cell { row: 0, col: 0, source }) => {
                assert!(matches!(*source, Error::SignDegenerate { .. }))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_set_against_half_scale_matches_direct_sum() {
        let half = DenseMapping::new("half", Vec::new(), |q| Point2 { x: 0.5 * q.x, y: 0.5 * q.y });
        for n in [2usize, 8, 16] {
            let grid = Grid::new(n, n).unwrap();
            let (rmse, max) = remap_error(
                &[HomographyParams::IDENTITY],
                &SelectionMap::uniform(grid, 0),
                &half,
                256.0,
            )
            .unwrap();
            // Error at (x, y) is 0.5 * |(x, y)| normalized = 64 * |(x, y)| pixels.
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = ((2 * i + 1) as f64 / n as f64 - 1.0, (2 * j + 1) as f64 / n as f64 - 1.0);
                    sum += 64.0 * 64.0 * (x * x + y * y);
                }
            }
            assert!((rmse - (sum / (n * n) as f64).sqrt()).abs() < 1e-9);
            let closed = 64.0 * (2.0 * (1.0 - 1.0 / (n * n) as f64) / 3.0).sqrt();
            assert!((rmse - closed).abs() < 1e-9);
            let edge = 1.0 - 1.0 / n as f64;
            assert!((max - 64.0 * edge * 2f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn family_member_is_recovered() {
        let target = HomographyParams::new(1.3, 0.8, 0.1, 0.0).unwrap();
        let m = DenseMapping::from_homography(target);
        let r = fit_homography_set(&m, 1, Grid::new(32, 32).unwrap(), &FitConfig::default()).unwrap();
        assert!(r.rmse < 1e-3, "{}", r.rmse);
        assert!(r.params[0].distance(&target) < 1e-6);
        let r = fit_homography_set(&DenseMapping::identity(), 3, Grid::new(16, 16).unwrap(), &FitConfig::default())
            .unwrap();
        assert!(r.rmse < 1e-3);
        assert!(r.rmse <= r.max_error);
    }

    #[test]
    fn nested_fits_never_get_worse_and_selection_is_optimal() {
        let grid = Grid::new(16, 16).unwrap();
        let m = sphere();
        let reports = fit_nested(&m, 4, grid, &FitConfig::default()).unwrap();
        for w in reports.windows(2) {
            assert!(w[1].rmse <= w[0].rmse + 1e-9);
        }
        let last = reports.last().unwrap();
        for (c, q) in grid.points().into_iter().enumerate() {
            let d = m.apply(q);
            let chosen = sq_error(&last.params[last.selection.indices[c]], q, d);
            for p in &last.params {
                assert!(chosen <= sq_error(p, q, d));
            }
        }
    }

    #[test]
    fn seeding_with_an_extra_identity_never_hurts() {
        let grid = Grid::new(16, 16).unwrap();
        let m = sphere();
        let cfg = FitConfig::default();
        let one = fit_homography_set(&m, 1, grid, &cfg).unwrap();
        let mut seed = one.params.clone();
        seed.push(HomographyParams::IDENTITY);
        let two = fit_homography_set_from(&m, seed, grid, &cfg).unwrap();
        assert!(two.rmse <= one.rmse + 1e-9);
    }

    #[test]
    fn rejects_bad_requests() {
        let g = Grid::new(8, 8).unwrap();
        assert!(fit_homography_set(&sphere(), 0, g, &FitConfig::default()).is_err());
        assert!(fit_homography_set_from(&sphere(), Vec::new(), g, &FitConfig::default()).is_err());
        let sel = SelectionMap::uniform(g, 3);
        assert!(remap_error(&[HomographyParams::IDENTITY], &sel, &sphere(), 256.0).is_err());
    }
}
