//! Lane geometry in its three forms, rasterization and the pairwise lane
//! similarity primitives (Line-IoU, mask IoU, keypoint distance).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of vertices of a lane polygon.
pub const POLYGON_VERTICES: usize = 28;
/// Number of keypoints of an anchor (polyline) lane.
pub const ANCHOR_KEYPOINTS: usize = 14;
/// Number of polynomial coefficients of a parameter lane.
pub const POLY_COEFFS: usize = 5;
/// Default number of sampled rows for Line-IoU.
pub const DEFAULT_LIOU_ROWS: usize = 72;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("polyline y must be strictly increasing (point {0})")]
    NonMonotonicY(usize),
    #[error("point {index} ({x}, {y}) lies outside the image")]
    OutOfBounds { index: usize, x: f64, y: f64 },
    #[error("polygon must have {POLYGON_VERTICES} vertices, got {0}")]
    WrongVertexCount(usize),
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
    #[error("vertical offset {offset} outside [0, {height}]")]
    OffsetOutOfRange { offset: f64, height: f64 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimsMismatch(ImageDims, ImageDims),
    #[error("row grids differ: {0} vs {1} rows")]
    RowGridMismatch(usize, usize),
    #[error("half-width must be positive, got {0}")]
    NonPositiveHalfWidth(f64),
    #[error("n_rows must be at least 2, got {0}")]
    TooFewRows(usize),
    #[error("incomparable lanes: no overlapping rows")]
    IncomparableLanes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn w(&self) -> f64 {
        f64::from(self.width)
    }

    pub fn h(&self) -> f64 {
        f64::from(self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.x <= self.w() && p.y >= 0.0 && p.y <= self.h()
    }
}

/// Image-space point in pixels. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Anything that can report a lane x-position per image row.
pub trait RowSampled {
    /// Lane x at row `y`, or `None` where the lane does not cover that row.
    fn x_at(&self, y: f64, dims: ImageDims) -> Option<f64>;
}

impl<T: RowSampled + ?Sized> RowSampled for &T {
    fn x_at(&self, y: f64, dims: ImageDims) -> Option<f64> {
        (**self).x_at(y, dims)
    }
}

/// Lane as ordered keypoints, top to bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolylineLane {
    pub points: Vec<Point>,
}

impl PolylineLane {
    pub fn new(points: Vec<Point>, dims: ImageDims) -> Result<Self, GeometryError> {
        let lane = Self { points };
        lane.validate(dims)?;
        Ok(lane)
    }

    pub fn validate(&self, dims: ImageDims) -> Result<(), GeometryError> {
        if self.points.len() < 2 {
            return Err(GeometryError::TooFewPoints(self.points.len()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(GeometryError::NonFinite);
            }
            if !dims.contains(*p) {
                return Err(GeometryError::OutOfBounds { index: i, x: p.x, y: p.y });
            }
            if i > 0 && p.y <= self.points[i - 1].y {
                return Err(GeometryError::NonMonotonicY(i));
            }
        }
        Ok(())
    }

    /// Smallest and largest keypoint row.
    pub fn y_span(&self) -> Option<(f64, f64)> {
        let mut it = self.points.iter().map(|p| p.y);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), y| (lo.min(y), hi.max(y))))
    }
}

impl RowSampled for PolylineLane {
    fn x_at(&self, y: f64, _dims: ImageDims) -> Option<f64> {
        // Segments are scanned in order so that decoded lanes with unsorted
        // keypoints still produce a deterministic answer.
        for w in self.points.windows(2) {
            let (p, q) = (w[0], w[1]);
            let (lo, hi) = if p.y <= q.y { (p, q) } else { (q, p) };
            if y < lo.y || y > hi.y {
                continue;
            }
            if hi.y == lo.y {
                return Some(0.5 * (lo.x + hi.x));
            }
            let t = (y - lo.y) / (hi.y - lo.y);
            return Some(lo.x + t * (hi.x - lo.x));
        }
        None
    }
}

/// Closed polygon around one lane instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonLane {
    pub vertices: Vec<Point>,
}

impl PolygonLane {
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let lane = Self { vertices };
        lane.validate()?;
        Ok(lane)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.vertices.len() != POLYGON_VERTICES {
            return Err(GeometryError::WrongVertexCount(self.vertices.len()));
        }
        if self.vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if let Some((i, j)) = first_self_intersection(&self.vertices) {
            return Err(GeometryError::SelfIntersecting(i, j));
        }
        Ok(())
    }

    /// Signed shoelace area.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }
}

impl RowSampled for PolygonLane {
    /// Midpoint of the polygon's x-extent at row `y`.
    fn x_at(&self, y: f64, _dims: ImageDims) -> Option<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (p, q) in self.edges() {
            if p.y == q.y {
                if p.y == y {
                    lo = lo.min(p.x.min(q.x));
                    hi = hi.max(p.x.max(q.x));
                }
                continue;
            }
            let (a, b) = if p.y < q.y { (p, q) } else { (q, p) };
            if y < a.y || y > b.y {
                continue;
            }
            let x = a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x);
            lo = lo.min(x);
            hi = hi.max(x);
        }
        (lo <= hi).then(|| 0.5 * (lo + hi))
    }
}

/// Polynomial lane `x = Wid * sum_i coeffs[i] * (y / Hei)^i` for `y >= offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLane {
    pub coeffs: [f64; POLY_COEFFS],
    pub offset: f64,
}

impl PolyLane {
    pub fn new(coeffs: [f64; POLY_COEFFS], offset: f64, dims: ImageDims) -> Result<Self, GeometryError> {
        let lane = Self { coeffs, offset };
        lane.validate(dims)?;
        Ok(lane)
    }

    pub fn validate(&self, dims: ImageDims) -> Result<(), GeometryError> {
        if self.coeffs.iter().any(|c| !c.is_finite()) || !self.offset.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if self.offset < 0.0 || self.offset > dims.h() {
            return Err(GeometryError::OffsetOutOfRange { offset: self.offset, height: dims.h() });
        }
        Ok(())
    }
}

/// Evaluates a parameter lane at row `y`; absent above the vertical offset.
pub fn poly_eval(lane: &PolyLane, y: f64, dims: ImageDims) -> Option<f64> {
    if y < lane.offset {
        return None;
    }
    let v = y / dims.h();
    // Horner, highest power first.
    let s = lane.coeffs.iter().rev().fold(0.0, |acc, c| acc * v + c);
    Some((dims.w() * s).clamp(0.0, dims.w()))
}

impl RowSampled for PolyLane {
    fn x_at(&self, y: f64, dims: ImageDims) -> Option<f64> {
        poly_eval(self, y, dims)
    }
}

/// A lane in any of the three geometric forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lane {
    Polyline(PolylineLane),
    Polygon(PolygonLane),
    Poly(PolyLane),
}

impl RowSampled for Lane {
    fn x_at(&self, y: f64, dims: ImageDims) -> Option<f64> {
        match self {
            Lane::Polyline(l) => l.x_at(y, dims),
            Lane::Polygon(l) => l.x_at(y, dims),
            Lane::Poly(l) => l.x_at(y, dims),
        }
    }
}

/// Per-row x samples on the grid `y_r = r * Hei / (n_rows - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLane {
    pub xs: Vec<Option<f64>>,
}

impl SampledLane {
    pub fn is_empty(&self) -> bool {
        self.xs.iter().all(Option::is_none)
    }
}

pub fn row_positions(dims: ImageDims, n_rows: usize) -> Vec<f64> {
    let step = dims.h() / (n_rows as f64 - 1.0);
    (0..n_rows).map(|r| r as f64 * step).collect()
}

pub fn sample_rows<L: RowSampled + ?Sized>(
    lane: &L,
    dims: ImageDims,
    n_rows: usize,
) -> Result<SampledLane, GeometryError> {
    if n_rows < 2 {
        return Err(GeometryError::TooFewRows(n_rows));
    }
    let xs = row_positions(dims, n_rows).into_iter().map(|y| lane.x_at(y, dims)).collect();
    Ok(SampledLane { xs })
}

/// Row grid and segment half-width used for Line-IoU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineIouParams {
    pub n_rows: usize,
    /// Half-width at an 800 px wide image; scaled with the actual width.
    pub half_width_at_800: f64,
}

impl Default for LineIouParams {
    fn default() -> Self {
        Self { n_rows: DEFAULT_LIOU_ROWS, half_width_at_800: 15.0 }
    }
}

impl LineIouParams {
    pub fn half_width(&self, dims: ImageDims) -> f64 {
        self.half_width_at_800 * dims.w() / 800.0
    }
}

/// Line-IoU of two lanes sampled on the same row grid.
///
/// Each present sample is widened to `[x - e, x + e]`. Rows where only one
/// lane is present contribute an overlap of `-2e` and a union of `2e`; rows
/// where neither is present are skipped.
pub fn line_iou(a: &SampledLane, b: &SampledLane, e: f64) -> Result<f64, GeometryError> {
    if a.xs.len() != b.xs.len() {
        return Err(GeometryError::RowGridMismatch(a.xs.len(), b.xs.len()));
    }
    if !(e > 0.0) {
        return Err(GeometryError::NonPositiveHalfWidth(e));
    }
    let mut overlap = 0.0;
    let mut union = 0.0;
    for (xa, xb) in a.xs.iter().zip(&b.xs) {
        match (xa, xb) {
            (Some(xa), Some(xb)) => {
                let (lo, hi) = if xa <= xb { (xa, xb) } else { (xb, xa) };
                overlap += (lo + e) - (hi - e);
                union += (hi + e) - (lo - e);
            }
            (Some(_), None) | (None, Some(_)) => {
                overlap -= 2.0 * e;
                union += 2.0 * e;
            }
            (None, None) => {}
        }
    }
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok((overlap / union).clamp(-1.0, 1.0))
}

/// Convenience: samples both lanes and computes their Line-IoU.
pub fn lane_iou<A: RowSampled + ?Sized, B: RowSampled + ?Sized>(
    a: &A,
    b: &B,
    dims: ImageDims,
    params: &LineIouParams,
) -> Result<f64, GeometryError> {
    let sa = sample_rows(a, dims, params.n_rows)?;
    let sb = sample_rows(b, dims, params.n_rows)?;
    line_iou(&sa, &sb, params.half_width(dims))
}

/// Mean Euclidean distance between predicted keypoints and the ground-truth
/// keypoints at the same sequence positions.
///
/// The ground truth is resampled to the prediction's keypoint count over its
/// own vertical span. Prediction keypoints whose row lies outside the ground
/// truth span are excluded.
pub fn keypoint_distance(
    pred: &PolylineLane,
    gt: &PolylineLane,
    dims: ImageDims,
) -> Result<f64, GeometryError> {
    let (lo, hi) = gt.y_span().ok_or(GeometryError::IncomparableLanes)?;
    let gt_points: Vec<Point> = if gt.points.len() == pred.points.len() {
        gt.points.clone()
    } else {
        let n = pred.points.len();
        (0..n)
            .filter_map(|k| {
                let y = if n > 1 { lo + (hi - lo) * k as f64 / (n as f64 - 1.0) } else { hi };
                gt.x_at(y, dims).map(|x| Point::new(x, y))
            })
            .collect()
    };
    let (sum, count) = pred
        .points
        .iter()
        .zip(&gt_points)
        .filter(|(p, _)| p.y >= lo && p.y <= hi)
        .fold((0.0, 0usize), |(s, c), (p, g)| (s + p.dist(g), c + 1));
    if count == 0 {
        return Err(GeometryError::IncomparableLanes);
    }
    Ok(sum / count as f64)
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterMask {
    pub dims: ImageDims,
    pub bits: Vec<bool>,
}

impl RasterMask {
    pub fn empty(dims: ImageDims) -> Self {
        Self { dims, bits: vec![false; dims.pixel_count()] }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.dims.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[(y * self.dims.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Marks every pixel whose center lies inside the polygon (even-odd rule).
///
/// A zero-area polygon yields an empty mask and logs a warning.
pub fn rasterize_polygon(poly: &PolygonLane, dims: ImageDims) -> RasterMask {
    let mut mask = RasterMask::empty(dims);
    if poly.signed_area().abs() < 1e-12 {
        log::warn!("degenerate lane polygon (zero area); rasterized as empty");
        return mask;
    }
    let mut crossings = Vec::with_capacity(8);
    for row in 0..dims.height {
        let yc = f64::from(row) + 0.5;
        crossings.clear();
        for (p, q) in poly.edges() {
            if (p.y > yc) != (q.y > yc) {
                crossings.push(p.x + (yc - p.y) / (q.y - p.y) * (q.x - p.x));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // Centers c + 0.5 in [x0, x1).
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(dims.w());
            let mut c = start;
            while c < end {
                mask.set(c as u32, row, true);
                c += 1.0;
            }
        }
    }
    mask
}

/// Intersection over union of two masks; 0 when both are empty.
pub fn mask_iou(a: &RasterMask, b: &RasterMask) -> Result<f64, GeometryError> {
    if a.dims != b.dims {
        return Err(GeometryError::DimsMismatch(a.dims, b.dims));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

fn shoelace(v: &[Point]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| {
        let (p, q) = (v[i], v[(i + 1) % n]);
        p.x * q.y - q.x * p.y
    })
    .sum::<f64>()
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// First pair of non-adjacent closed-polygon edges that touch or cross.
fn first_self_intersection(v: &[Point]) -> Option<(usize, usize)> {
    let n = v.len();
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}
