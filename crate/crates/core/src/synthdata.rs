//! Procedural lane scenes with ground truth in all three lane forms, the
//! flip/affine augmentations, and the on-disk dataset format.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::bottom_x;
use crate::geometry::{
    ImageDims, Lane, Point, PolyLane, PolygonLane, PolylineLane, RowSampled, ANCHOR_KEYPOINTS, POLY_COEFFS,
};

pub const ANNOTATION_FILE: &str = "annotations.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: bad image: {msg}")]
    Image { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, pixels: vec![0; width as usize * height as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims { width: self.width, height: self.height }
    }

    /// Binary PGM (`P5`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, String> {
        let (fields, data) = parse_pnm_header(bytes, b"P5")?;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let n = width as usize * height as usize;
        if data.len() < n {
            return Err(format!("expected {n} pixel bytes, found {}", data.len()));
        }
        Ok(Self { width, height, pixels: data[..n].to_vec() })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|p| f64::from(*p)).sum::<f64>() / self.pixels.len().max(1) as f64
    }
}

/// Parses a binary PNM header with the given magic; returns width, height,
/// maxval and the remaining payload.
pub fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<([u32; 3], &'a [u8]), String> {
    if !bytes.starts_with(magic) {
        return Err("bad magic".into());
    }
    let mut pos = magic.len();
    let mut fields = [0u32; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad header number")?;
    }
    // exactly one whitespace byte separates header and data
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("truncated header".into());
    }
    Ok((fields, &bytes[pos + 1..]))
}

/// Generator parameters. Ranges are inclusive `(min, max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub lane_count: (usize, usize),
    /// Horizon row as a fraction of the height.
    pub horizon: (f64, f64),
    /// Gap between horizon and lane top, fraction of the height.
    pub top_gap: (f64, f64),
    /// Bend of the centerline, fraction of the width at mid-lane.
    pub curvature: (f64, f64),
    /// Minimum gap between neighbouring lane bottoms, fraction of the width.
    pub min_spacing: f64,
    pub lane_width: f64,
    pub noise: f64,
    pub background: (f64, f64),
    pub lane_intensity: (f64, f64),
    pub texture_amplitude: f64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 160,
            height: 64,
            lane_count: (1, 4),
            horizon: (0.25, 0.35),
            top_gap: (0.12, 0.2),
            curvature: (-0.12, 0.12),
            min_spacing: 0.18,
            lane_width: 3.0,
            noise: 0.04,
            background: (0.1, 0.3),
            lane_intensity: (0.7, 0.95),
            texture_amplitude: 0.04,
            max_retries: 32,
        }
    }
}

impl SceneSpec {
    pub fn dims(&self) -> ImageDims {
        ImageDims { width: self.width, height: self.height }
    }
}

/// One generated (or loaded) scene with its three ground-truth forms.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub index: u64,
    pub seed: u64,
    pub image: GrayImage,
    pub polylines: Vec<PolylineLane>,
    pub polygons: Vec<PolygonLane>,
    pub params: Vec<PolyLane>,
}

impl SceneRecord {
    pub fn dims(&self) -> ImageDims {
        self.image.dims()
    }

    pub fn lane_count(&self) -> usize {
        self.polylines.len()
    }

    /// Ground truth in the geometric form used by `fmt`.
    pub fn lanes_for(&self, fmt: crate::codec::SequenceFormat) -> Vec<Lane> {
        use crate::codec::SequenceFormat::*;
        match fmt {
            Segmentation => self.polygons.iter().cloned().map(Lane::Polygon).collect(),
            Anchor => self.polylines.iter().cloned().map(Lane::Polyline).collect(),
            Parameter => self.params.iter().cloned().map(Lane::Poly).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), crate::geometry::GeometryError> {
        let d = self.dims();
        for l in &self.polylines {
            l.validate(d)?;
        }
        for p in &self.polygons {
            p.validate()?;
        }
        for p in &self.params {
            p.validate(d)?;
        }
        Ok(())
    }
}

/// Centerline `x = W * sum c_i v^i` over rows `[top, bottom]` (pixels).
#[derive(Debug, Clone)]
struct Centerline {
    coeffs: [f64; POLY_COEFFS],
    top: f64,
    bottom: f64,
}

impl Centerline {
    fn x(&self, y: f64, dims: ImageDims) -> f64 {
        let v = y / dims.h();
        dims.w() * self.coeffs.iter().rev().fold(0.0, |acc, c| acc * v + c)
    }

    fn slope(&self, y: f64, dims: ImageDims) -> f64 {
        // dx/dy
        let v = y / dims.h();
        let mut d = 0.0;
        for i in (1..POLY_COEFFS).rev() {
            d = d * v + i as f64 * self.coeffs[i];
        }
        dims.w() / dims.h() * d
    }
}

impl RowSampled for Centerline {
    fn x_at(&self, y: f64, dims: ImageDims) -> Option<f64> {
        (y >= self.top && y <= self.bottom).then(|| self.x(y, dims))
    }
}

/// Least-squares fit of `x / W` as a degree-4 polynomial in `y / H`.
pub fn fit_poly(points: &[Point], dims: ImageDims) -> [f64; POLY_COEFFS] {
    let n = points.len();
    let a = DMatrix::from_fn(n, POLY_COEFFS, |r, c| (points[r].y / dims.h()).powi(c as i32));
    let b = DVector::from_iterator(n, points.iter().map(|p| p.x / dims.w()));
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, 1e-12).expect("svd computed with u and v");
    let mut out = [0.0; POLY_COEFFS];
    out.copy_from_slice(sol.as_slice());
    out
}

fn keypoint_rows(top: f64, bottom: f64) -> impl Iterator<Item = f64> {
    let n = ANCHOR_KEYPOINTS;
    (0..n).map(move |k| top + (bottom - top) * k as f64 / (n as f64 - 1.0))
}

fn polygon_from_keypoints(points: &[Point], lane_width: f64, dims: ImageDims) -> PolygonLane {
    let half = 0.5 * lane_width;
    let mut v: Vec<Point> = points.iter().map(|p| Point::new((p.x - half).clamp(0.0, dims.w()), p.y)).collect();
    v.extend(points.iter().rev().map(|p| Point::new((p.x + half).clamp(0.0, dims.w()), p.y)));
    PolygonLane { vertices: v }
}

/// Builds all three forms from a lane traced by `x_of(y)` over `[top, bottom]`.
fn lane_forms(
    x_of: impl Fn(f64) -> f64,
    fit_points: &[Point],
    top: f64,
    bottom: f64,
    lane_width: f64,
    dims: ImageDims,
) -> (PolylineLane, PolygonLane, PolyLane) {
    let keypoints: Vec<Point> =
        keypoint_rows(top, bottom).map(|y| Point::new(x_of(y).clamp(0.0, dims.w()), y)).collect();
    let polygon = polygon_from_keypoints(&keypoints, lane_width, dims);
    let coeffs = fit_poly(fit_points, dims);
    (PolylineLane { points: keypoints }, polygon, PolyLane { coeffs, offset: top })
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_centerlines(spec: &SceneSpec, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Centerline>> {
    let dims = spec.dims();
    let ux = rng.random_range(0.35..=0.65);
    let vh = uniform(rng, spec.horizon);
    let bend = uniform(rng, spec.curvature);

    let mut bottoms: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        bottoms.push(rng.random_range(0.05..=0.95));
    }
    bottoms.sort_by(f64::total_cmp);
    if bottoms.windows(2).any(|w| w[1] - w[0] < spec.min_spacing) {
        return None;
    }

    let mut lanes = Vec::with_capacity(n);
    for ub in bottoms {
        let vt = vh + uniform(rng, spec.top_gap);
        let k = bend + rng.random_range(-0.02..=0.02);
        // u(v) = ux + (ub - ux) t + k t (1 - t),  t = (v - vh) / (1 - vh)
        let span = 1.0 - vh;
        let (p, q) = (1.0 / span, -vh / span); // t = p v + q
        let lin = ub - ux + k;
        let c0 = ux + lin * q - k * q * q;
        let c1 = lin * p - 2.0 * k * p * q;
        let c2 = -k * p * p;
        lanes.push(Centerline { coeffs: [c0, c1, c2, 0.0, 0.0], top: vt * dims.h(), bottom: dims.h() });
    }

    let rows: Vec<f64> = (0..=4 * spec.height).map(|r| f64::from(r) * 0.25).collect();
    for l in &lanes {
        if rows.iter().filter(|y| **y >= l.top).any(|y| {
            let x = l.x(*y, dims);
            x < 0.0 || x > dims.w()
        }) {
            return None;
        }
    }
    let min_gap = 1.5 * spec.lane_width;
    for w in lanes.windows(2) {
        for y in rows.iter().filter(|y| **y >= w[0].top.max(w[1].top)) {
            if w[1].x(*y, dims) - w[0].x(*y, dims) < min_gap {
                return None;
            }
        }
    }
    Some(lanes)
}

fn render(spec: &SceneSpec, lanes: &[Centerline], rng: &mut ChaCha8Rng) -> GrayImage {
    let dims = spec.dims();
    let base = uniform(rng, spec.background);
    let grad = rng.random_range(-0.1..=0.1);
    let amp = spec.texture_amplitude;
    let (fx, fy, phase) = (rng.random_range(0.02..0.12), rng.random_range(0.05..0.25), rng.random_range(0.0..6.3));
    let intensity: Vec<f64> = lanes.iter().map(|_| uniform(rng, spec.lane_intensity)).collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite std");

    let mut img = GrayImage::new(spec.width, spec.height);
    let half = 0.5 * spec.lane_width;
    for py in 0..spec.height {
        let yc = f64::from(py) + 0.5;
        let v = yc / dims.h();
        for px in 0..spec.width {
            let xc = f64::from(px) + 0.5;
            let mut value = base + grad * v + amp * (fx * xc + fy * yc + phase).sin();
            for (l, li) in lanes.iter().zip(&intensity) {
                if yc < l.top - 0.5 {
                    continue;
                }
                let top_fade = (yc - l.top + 0.5).clamp(0.0, 1.0);
                let s = l.slope(yc, dims);
                let d = (xc - l.x(yc, dims)).abs() / (1.0 + s * s).sqrt();
                let cov = (half + 0.5 - d).clamp(0.0, 1.0) * top_fade;
                value = value * (1.0 - cov) + li * cov;
            }
            value += noise.sample(rng);
            img.pixels[(py * spec.width + px) as usize] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// Generates scene `index` of the stream defined by `spec.seed`.
/// Deterministic in `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> SceneRecord {
    let dims = spec.dims();
    let mut rng = scene_rng(spec.seed, index);
    let (lo, hi) = spec.lane_count;
    let mut n = if hi > lo { rng.random_range(lo..=hi) } else { lo };

    let lanes = loop {
        if n == 0 {
            break Vec::new();
        }
        let found = (0..spec.max_retries.max(1)).find_map(|_| sample_centerlines(spec, n, &mut rng));
        match found {
            Some(l) => break l,
            None => n -= 1,
        }
    };

    let image = render(spec, &lanes, &mut rng);
    let mut polylines = Vec::with_capacity(lanes.len());
    let mut polygons = Vec::with_capacity(lanes.len());
    let mut params = Vec::with_capacity(lanes.len());
    for l in &lanes {
        let fit: Vec<Point> = (0..32)
            .map(|i| l.top + (l.bottom - l.top) * f64::from(i) / 31.0)
            .map(|y| Point::new(l.x(y, dims), y))
            .collect();
        let (pl, pg, pp) = lane_forms(|y| l.x(y, dims), &fit, l.top, l.bottom, spec.lane_width, dims);
        polylines.push(pl);
        polygons.push(pg);
        params.push(pp);
    }
    SceneRecord { index, seed: spec.seed, image, polylines, polygons, params }
}

/// Augmentation settings; the defaults are mild at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub flip_prob: f64,
    pub affine: bool,
    pub scale: (f64, f64),
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub lane_width: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            flip_prob: 0.5,
            affine: true,
            scale: (0.9, 1.1),
            rotation_deg: 5.0,
            translate_frac: 0.05,
            lane_width: 3.0,
        }
    }
}

/// Similarity transform about the image center: scale, rotate, translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    pub rotation_rad: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self { scale: 1.0, rotation_rad: 0.0, tx: 0.0, ty: 0.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn apply(&self, p: Point, dims: ImageDims) -> Point {
        let (cx, cy) = (0.5 * dims.w(), 0.5 * dims.h());
        let (s, c) = self.rotation_rad.sin_cos();
        let (dx, dy) = (p.x - cx, p.y - cy);
        Point::new(
            self.scale * (c * dx - s * dy) + cx + self.tx,
            self.scale * (s * dx + c * dy) + cy + self.ty,
        )
    }

    fn invert(&self, p: Point, dims: ImageDims) -> Point {
        let (cx, cy) = (0.5 * dims.w(), 0.5 * dims.h());
        let (s, c) = self.rotation_rad.sin_cos();
        let (dx, dy) = ((p.x - cx - self.tx) / self.scale, (p.y - cy - self.ty) / self.scale);
        Point::new(c * dx + s * dy + cx, -s * dx + c * dy + cy)
    }
}

/// Something notable that happened while augmenting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AugmentDiagnostic {
    LaneLeftImage { lane: usize },
}

fn sort_lanes(rec: &mut SceneRecord) {
    let dims = rec.dims();
    let mut order: Vec<usize> = (0..rec.polylines.len()).collect();
    order.sort_by(|a, b| bottom_x(&rec.polylines[*a], dims).total_cmp(&bottom_x(&rec.polylines[*b], dims)));
    rec.polylines = order.iter().map(|i| rec.polylines[*i].clone()).collect();
    rec.polygons = order.iter().map(|i| rec.polygons[*i].clone()).collect();
    rec.params = order.iter().map(|i| rec.params[*i].clone()).collect();
}

/// Exact horizontal mirror of image and all ground truth.
pub fn flip_record(rec: &SceneRecord) -> SceneRecord {
    let dims = rec.dims();
    let w = dims.w();
    let mut image = rec.image.clone();
    for y in 0..image.height {
        let row = &mut image.pixels[(y * image.width) as usize..((y + 1) * image.width) as usize];
        row.reverse();
    }
    let mirror = |p: &Point| Point::new(w - p.x, p.y);
    let mut out = SceneRecord {
        index: rec.index,
        seed: rec.seed,
        image,
        polylines: rec.polylines.iter().map(|l| PolylineLane { points: l.points.iter().map(mirror).collect() }).collect(),
        polygons: rec
            .polygons
            .iter()
            .map(|l| PolygonLane { vertices: l.vertices.iter().rev().map(mirror).collect() })
            .collect(),
        params: rec
            .params
            .iter()
            .map(|l| {
                let mut c = l.coeffs.map(|a| -a);
                c[0] += 1.0;
                PolyLane { coeffs: c, offset: l.offset }
            })
            .collect(),
    };
    sort_lanes(&mut out);
    out
}

fn bilinear(img: &GrayImage, x: f64, y: f64, fill: f64) -> f64 {
    // pixel centers at integer + 0.5
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let at = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= f64::from(img.width) || yi >= f64::from(img.height) {
            fill
        } else {
            f64::from(img.get(xi as u32, yi as u32))
        }
    };
    let top = at(x0, y0) * (1.0 - ax) + at(x0 + 1.0, y0) * ax;
    let bot = at(x0, y0 + 1.0) * (1.0 - ax) + at(x0 + 1.0, y0 + 1.0) * ax;
    top * (1.0 - ay) + bot * ay
}

/// Applies a similarity transform to image and ground truth. Lanes are
/// transformed along their centerline, clipped to the image and re-fit.
pub fn affine_record(rec: &SceneRecord, t: &AffineParams, lane_width: f64) -> (SceneRecord, Vec<AugmentDiagnostic>) {
    if t.is_identity() {
        return (rec.clone(), Vec::new());
    }
    let dims = rec.dims();
    let fill = rec.image.mean();
    let mut image = GrayImage::new(dims.width, dims.height);
    for py in 0..dims.height {
        for px in 0..dims.width {
            let src = t.invert(Point::new(f64::from(px) + 0.5, f64::from(py) + 0.5), dims);
            let v = bilinear(&rec.image, src.x, src.y, fill);
            image.pixels[(py * dims.width + px) as usize] = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    let mut out = SceneRecord { index: rec.index, seed: rec.seed, image, polylines: vec![], polygons: vec![], params: vec![] };
    let mut diags = Vec::new();
    for (i, lane) in rec.params.iter().enumerate() {
        let (top, bottom) = match rec.polylines.get(i).and_then(PolylineLane::y_span) {
            Some(span) => span,
            None => (lane.offset, dims.h()),
        };
        let mut pts: Vec<Point> = (0..64)
            .map(|k| top + (bottom - top) * f64::from(k) / 63.0)
            .filter_map(|y| lane.x_at(y, dims).map(|x| t.apply(Point::new(x, y), dims)))
            .filter(|p| p.x >= 0.0 && p.x <= dims.w() && p.y >= 0.0 && p.y <= dims.h())
            .collect();
        pts.sort_by(|a, b| a.y.total_cmp(&b.y));
        pts.dedup_by(|a, b| (a.y - b.y).abs() < 1e-9);
        let span = pts.last().map(|l| l.y).unwrap_or(0.0) - pts.first().map(|f| f.y).unwrap_or(0.0);
        if pts.len() < POLY_COEFFS || span < 2.0 {
            diags.push(AugmentDiagnostic::LaneLeftImage { lane: i });
            continue;
        }
        let traced = PolylineLane { points: pts.clone() };
        let (top, bottom) = (pts[0].y, pts[pts.len() - 1].y);
        let (pl, pg, pp) =
            lane_forms(|y| traced.x_at(y, dims).unwrap_or(0.0), &pts, top, bottom, lane_width, dims);
        out.polylines.push(pl);
        out.polygons.push(pg);
        out.params.push(pp);
    }
    sort_lanes(&mut out);
    (out, diags)
}

/// Random flip plus random affine, per `cfg`.
pub fn augment(rec: &SceneRecord, rng: &mut impl Rng, cfg: &AugmentConfig) -> (SceneRecord, Vec<AugmentDiagnostic>) {
    let mut out = if cfg.flip && rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) { flip_record(rec) } else { rec.clone() };
    let mut diags = Vec::new();
    if cfg.affine {
        let dims = out.dims();
        let t = AffineParams {
            scale: uniform(rng, cfg.scale),
            rotation_rad: uniform(rng, (-cfg.rotation_deg, cfg.rotation_deg)).to_radians(),
            tx: uniform(rng, (-cfg.translate_frac, cfg.translate_frac)) * dims.w(),
            ty: uniform(rng, (-cfg.translate_frac, cfg.translate_frac)) * dims.h(),
        };
        let (r, d) = affine_record(&out, &t, cfg.lane_width);
        out = r;
        diags = d;
    }
    (out, diags)
}

/// One JSONL annotation line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLine {
    pub image: String,
    pub index: u64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub polylines: Vec<Vec<Point>>,
    pub polygons: Vec<Vec<Point>>,
    pub params: Vec<PolyLane>,
}

impl AnnotationLine {
    pub fn from_record(rec: &SceneRecord, image: String) -> Self {
        Self {
            image,
            index: rec.index,
            seed: rec.seed,
            width: rec.image.width,
            height: rec.image.height,
            polylines: rec.polylines.iter().map(|l| l.points.clone()).collect(),
            polygons: rec.polygons.iter().map(|l| l.vertices.clone()).collect(),
            params: rec.params.clone(),
        }
    }
}

pub fn image_file_name(index: u64) -> String {
    format!("{index:06}.pgm")
}

/// Generates `n` scenes and writes them under `dir`.
pub fn write_dataset(spec: &SceneSpec, n: u64, dir: &Path) -> Result<(), DatasetError> {
    use rayon::prelude::*;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let records: Vec<SceneRecord> = (0..n).into_par_iter().map(|i| generate_scene(spec, i)).collect();
    write_records(&records, dir)
}

/// Writes already generated records (images plus annotation file).
pub fn write_records(records: &[SceneRecord], dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ann_path = dir.join(ANNOTATION_FILE);
    let mut ann = BufWriter::new(fs::File::create(&ann_path).map_err(io_err(&ann_path))?);
    for rec in records {
        let name = image_file_name(rec.index);
        let img_path = dir.join(&name);
        fs::write(&img_path, rec.image.to_pgm()).map_err(io_err(&img_path))?;
        let line = serde_json::to_string(&AnnotationLine::from_record(rec, name)).expect("serializable");
        writeln!(ann, "{line}").map_err(io_err(&ann_path))?;
    }
    ann.flush().map_err(io_err(&ann_path))
}

/// Streams records back from a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<impl Iterator<Item = Result<SceneRecord, DatasetError>>, DatasetError> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let dir = dir.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(move |(i, line)| {
            let line_no = i + 1;
            let line = line.map_err(io_err(&ann_path))?;
            let parse = |msg: String| DatasetError::Parse { path: ann_path.clone(), line: line_no, msg };
            let ann: AnnotationLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            let img_path = dir.join(&ann.image);
            let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
            let image = GrayImage::from_pgm(&bytes).map_err(|msg| DatasetError::Image { path: img_path.clone(), msg })?;
            if image.width != ann.width || image.height != ann.height {
                return Err(parse(format!(
                    "image {} is {}x{}, annotation says {}x{}",
                    ann.image, image.width, image.height, ann.width, ann.height
                )));
            }
            let rec = SceneRecord {
                index: ann.index,
                seed: ann.seed,
                image,
                polylines: ann.polylines.into_iter().map(|points| PolylineLane { points }).collect(),
                polygons: ann.polygons.into_iter().map(|vertices| PolygonLane { vertices }).collect(),
                params: ann.params,
            };
            if rec.polylines.len() != rec.polygons.len() || rec.polylines.len() != rec.params.len() {
                return Err(parse("lane forms have different lane counts".into()));
            }
            rec.validate().map_err(|e| parse(e.to_string()))?;
            Ok(rec)
        }))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneRecord>, DatasetError> {
    read_dataset(dir)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::lane_iou;
    use crate::geometry::LineIouParams;

    #[test]
    fn zero_lane_spec_gives_blank_scene() {
        let spec = SceneSpec { lane_count: (0, 0), ..SceneSpec::default() };
        let rec = generate_scene(&spec, 3);
        assert_eq!(rec.lane_count(), 0);
        assert!(rec.polygons.is_empty() && rec.params.is_empty());
        assert_eq!(rec.image.pixels.len(), 160 * 64);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { seed: 9, ..SceneSpec::default() };
        assert_eq!(generate_scene(&spec, 5), generate_scene(&spec, 5));
        assert_ne!(generate_scene(&spec, 5).image, generate_scene(&spec, 6).image);
    }

    #[test]
    fn fit_recovers_quadratic() {
        let dims = ImageDims::new(160, 64).unwrap();
        let pts: Vec<Point> = (0..20)
            .map(|i| {
                let y = 20.0 + 2.0 * f64::from(i);
                let v = y / 64.0;
                Point::new(160.0 * (0.3 + 0.2 * v - 0.1 * v * v), y)
            })
            .collect();
        let c = fit_poly(&pts, dims);
        let want = [0.3, 0.2, -0.1, 0.0, 0.0];
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-8, "{c:?}");
        }
    }

    #[test]
    fn forms_agree_and_validate() {
        let spec = SceneSpec { seed: 1, ..SceneSpec::default() };
        let p = LineIouParams::default();
        for i in 0..50 {
            let rec = generate_scene(&spec, i);
            rec.validate().unwrap();
            let d = rec.dims();
            for k in 0..rec.lane_count() {
                assert!(lane_iou(&rec.polylines[k], &rec.polygons[k], d, &p).unwrap() >= 0.85);
                assert!(lane_iou(&rec.polylines[k], &rec.params[k], d, &p).unwrap() >= 0.85);
                assert!(lane_iou(&rec.polygons[k], &rec.params[k], d, &p).unwrap() >= 0.85);
            }
        }
    }

    #[test]
    fn flip_maps_x_to_width_minus_x() {
        let spec = SceneSpec { seed: 2, lane_count: (1, 1), ..SceneSpec::default() };
        let rec = generate_scene(&spec, 0);
        let f = flip_record(&rec);
        for (a, b) in rec.polylines[0].points.iter().zip(&f.polylines[0].points) {
            assert_eq!(b.x, 160.0 - a.x);
            assert_eq!(b.y, a.y);
        }
        let d = rec.dims();
        for y in [30.0, 45.0, 64.0] {
            let (x0, x1) = (rec.params[0].x_at(y, d).unwrap(), f.params[0].x_at(y, d).unwrap());
            assert!((x1 - (160.0 - x0)).abs() < 1e-9);
        }
        assert_eq!(rec.image.get(0, 10), f.image.get(159, 10));
    }

    #[test]
    fn flip_twice_restores_record() {
        let spec = SceneSpec { seed: 4, ..SceneSpec::default() };
        let rec = generate_scene(&spec, 7);
        let back = flip_record(&flip_record(&rec));
        assert_eq!(back.image, rec.image);
        let tol = 160.0 / 1000.0;
        for (a, b) in rec.polylines.iter().zip(&back.polylines) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!(p.dist(q) <= tol);
            }
        }
        for (a, b) in rec.polygons.iter().zip(&back.polygons) {
            for (p, q) in a.vertices.iter().zip(&b.vertices) {
                assert!(p.dist(q) <= tol);
            }
        }
        for (a, b) in rec.params.iter().zip(&back.params) {
            for (p, q) in a.coeffs.iter().zip(&b.coeffs) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_affine_is_noop() {
        let rec = generate_scene(&SceneSpec::default(), 0);
        let (out, diags) = affine_record(&rec, &AffineParams::IDENTITY, 3.0);
        assert_eq!(out, rec);
        assert!(diags.is_empty());
    }

    #[test]
    fn affine_keeps_forms_consistent() {
        let spec = SceneSpec { seed: 11, ..SceneSpec::default() };
        let t = AffineParams { scale: 1.05, rotation_rad: 3f64.to_radians(), tx: 4.0, ty: -2.0 };
        let p = LineIouParams::default();
        for i in 0..10 {
            let (rec, _) = affine_record(&generate_scene(&spec, i), &t, 3.0);
            rec.validate().unwrap();
            let d = rec.dims();
            for k in 0..rec.lane_count() {
                assert!(lane_iou(&rec.polylines[k], &rec.polygons[k], d, &p).unwrap() >= 0.85);
            }
        }
    }

    #[test]
    fn translation_far_off_image_drops_lanes() {
        let spec = SceneSpec { seed: 3, lane_count: (2, 2), ..SceneSpec::default() };
        let rec = generate_scene(&spec, 0);
        let t = AffineParams { tx: 400.0, ..AffineParams::IDENTITY };
        let (out, diags) = affine_record(&rec, &t, 3.0);
        assert_eq!(out.lane_count(), 0);
        assert_eq!(diags.len(), rec.lane_count());
    }

    #[test]
    fn pgm_roundtrip() {
        let rec = generate_scene(&SceneSpec::default(), 1);
        assert_eq!(GrayImage::from_pgm(&rec.image.to_pgm()).unwrap(), rec.image);
        let with_comment = b"P5\n# hi\n2 1\n255\n\x01\x02";
        assert_eq!(GrayImage::from_pgm(with_comment).unwrap().pixels, vec![1, 2]);
        assert!(GrayImage::from_pgm(b"P6\n1 1\n255\n\x00").is_err());
    }
}
