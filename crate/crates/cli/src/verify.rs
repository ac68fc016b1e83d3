//! Oracle suites runnable from the command line. Every check reports the
//! measured value next to its bound.

use std::time::Instant;

use laneseq_core::codec::{
    dequantize_coord, dequantize_param, quantize_coord, quantize_param, SceneCodec, SequenceFormat, Vocabulary,
    DEFAULT_N_BINS,
};
use laneseq_core::geometry::{
    lane_iou, mask_iou, rasterize_polygon, ImageDims, Lane, LineIouParams, Point, PolyLane, PolygonLane, PolylineLane,
};
use laneseq_core::metrics::{greedy_match, pairwise_liou, tusimple_threshold, MatchParams};
use laneseq_core::rewards::{combined_objective, reward_lanes, RewardWeights};
use laneseq_core::synthdata::{generate_scene, SceneRecord, SceneSpec};
use laneseq_model::autodiff::Fault;
use laneseq_model::gradcheck::{run_toy_gradcheck, MAX_RELATIVE_ERROR};
use laneseq_train::reinforce::estimate_gradient;
use laneseq_train::toy::{offset_reward, reference_policy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradcheck,
    Reinforce,
    Codec,
    Metrics,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Reinforce => "reinforce",
            Suite::Codec => "codec",
            Suite::Metrics => "metrics",
            Suite::All => "all",
        }
    }
}

/// Independently timed piece of a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    CodecValues,
    CodecScenes,
    MetricOracles,
    RewardProperties,
    Gradients,
    Estimator,
}

impl Suite {
    pub fn parts(self) -> Vec<Part> {
        match self {
            Suite::Codec => vec![Part::CodecValues, Part::CodecScenes],
            Suite::Metrics => vec![Part::MetricOracles, Part::RewardProperties],
            Suite::Gradcheck => vec![Part::Gradients],
            Suite::Reinforce => vec![Part::Estimator],
            Suite::All => [Suite::Codec, Suite::Metrics, Suite::Gradcheck, Suite::Reinforce]
                .into_iter()
                .flat_map(Suite::parts)
                .collect(),
        }
    }
}

impl Part {
    pub fn suite(self) -> Suite {
        match self {
            Part::CodecValues | Part::CodecScenes => Suite::Codec,
            Part::MetricOracles | Part::RewardProperties => Suite::Metrics,
            Part::Gradients => Suite::Gradcheck,
            Part::Estimator => Suite::Reinforce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    /// Human-readable bound, e.g. `<= 0.16`.
    pub bound: String,
    pub passed: bool,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}.{} measured={} bound={}", self.suite, self.name, self.measured, self.bound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub seconds: Vec<(Part, f64)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn seconds_for(&self, suite: Suite) -> f64 {
        self.seconds.iter().filter(|(p, _)| p.suite() == suite).map(|(_, t)| t).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    /// Backward-rule fault for the gradient suite (mutation sanity check).
    pub fault: Fault,
    pub seed: u64,
}

struct Recorder<'a> {
    suite: &'static str,
    checks: &'a mut Vec<Check>,
}

impl Recorder<'_> {
    fn at_most(&mut self, name: &str, measured: f64, bound: f64) {
        self.push(name, measured, format!("<= {bound}"), measured <= bound);
    }

    fn below(&mut self, name: &str, measured: f64, bound: f64) {
        self.push(name, measured, format!("< {bound}"), measured < bound);
    }

    fn near(&mut self, name: &str, measured: f64, target: f64, tol: f64) {
        self.push(name, measured, format!("{target} +/- {tol}"), (measured - target).abs() <= tol);
    }

    fn holds(&mut self, name: &str, violations: usize) {
        self.push(name, violations as f64, "0 violations".into(), violations == 0);
    }

    fn push(&mut self, name: &str, measured: f64, bound: String, passed: bool) {
        self.checks.push(Check { suite: self.suite.into(), name: name.into(), measured, bound, passed });
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    for part in suite.parts() {
        let (checks, secs) = run_part(part, opts);
        report.checks.extend(checks);
        report.seconds.push((part, secs));
    }
    report
}

/// Runs one part; returns its checks and wall time in seconds.
pub fn run_part(part: Part, opts: &VerifyOptions) -> (Vec<Check>, f64) {
    let t = Instant::now();
    let mut checks = Vec::new();
    let mut rec = Recorder { suite: part.suite().name(), checks: &mut checks };
    match part {
        Part::CodecValues => codec_values(&mut rec, opts.seed),
        Part::CodecScenes => codec_scenes(&mut rec, opts.seed),
        Part::MetricOracles => metric_oracles(&mut rec, opts.seed),
        Part::RewardProperties => reward_properties(&mut rec, opts.seed),
        Part::Gradients => gradcheck_suite(&mut rec, opts),
        Part::Estimator => reinforce_suite(&mut rec, opts.seed),
    }
    (checks, t.elapsed().as_secs_f64())
}

// ---- codec ----

fn codec_values(rec: &mut Recorder, seed: u64) {
    let n = DEFAULT_N_BINS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0dec);
    for extent in [160.0, 320.0, 800.0] {
        let worst = (0..10_000)
            .map(|_| {
                let v = rng.random_range(0.0..=extent);
                let t = quantize_coord(v, extent, n).expect("finite");
                (dequantize_coord(t, extent, n).expect("coordinate token") - v).abs()
            })
            .fold(0.0, f64::max);
        rec.at_most(&format!("coord_roundtrip_{extent}"), worst, extent / f64::from(n));
    }
    // error relative to the local logit slack, 1.0 is the bound
    let worst_param = (0..10_000)
        .map(|i| {
            let a = -4.0 + 8.0 * f64::from(i) / 9_999.0;
            let p = 1.0 / (1.0 + (-a).exp());
            let slack = 1.0 / (p * (1.0 - p)) / f64::from(n) * 1.01;
            let back = dequantize_param(quantize_param(a, n).expect("finite"), n).expect("coordinate token");
            (back - a).abs() / slack
        })
        .fold(0.0, f64::max);
    rec.at_most("param_roundtrip_over_slack", worst_param, 1.0);
}

fn codec_scenes(rec: &mut Recorder, seed: u64) {
    let spec = SceneSpec { seed, ..SceneSpec::default() };
    let (worst, mismatched) = scene_roundtrip(&spec, 1000, Vocabulary::new(DEFAULT_N_BINS));
    rec.at_most("scene_roundtrip_error_over_bound", worst, 1.0);
    rec.holds("scene_reencode_identity", mismatched);
}

/// Worst coordinate error divided by its bound, and the number of
/// sequences that did not re-encode to identical tokens.
pub fn scene_roundtrip(spec: &SceneSpec, scenes: u64, vocab: Vocabulary) -> (f64, usize) {
    let n = f64::from(vocab.n_bins);
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for i in 0..scenes {
        let r = generate_scene(spec, i);
        let dims = r.dims();
        let codec = SceneCodec::new(vocab, dims);
        let (bx, by) = (dims.w() / n, dims.h() / n);
        for fmt in SequenceFormat::ALL {
            let gt = r.lanes_for(fmt);
            let seq = codec.encode(&gt, fmt).expect("generated scenes encode");
            let dec = match codec.decode(&seq.tokens) {
                Ok(d) if d.lanes.len() == gt.len() => d,
                _ => {
                    mismatched += 1;
                    worst = f64::INFINITY;
                    continue;
                }
            };
            // the codec emits lanes left to right; match by the same order
            let order = sorted_by_bottom(&gt, dims);
            for (d, &gi) in dec.lanes.iter().zip(&order) {
                worst = worst.max(lane_error(d, &gt[gi], bx, by, vocab.n_bins));
            }
            match codec.encode(&dec.lanes, fmt) {
                Ok(again) if again.tokens == seq.tokens => {}
                _ => mismatched += 1,
            }
        }
    }
    (worst, mismatched)
}

fn sorted_by_bottom(lanes: &[Lane], dims: ImageDims) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lanes.len()).collect();
    let keys: Vec<f64> = lanes.iter().map(|l| laneseq_core::codec::bottom_x(l, dims)).collect();
    idx.sort_by(|a, b| keys[*a].total_cmp(&keys[*b]).then(a.cmp(b)));
    idx
}

fn point_error(a: &[Point], b: &[Point], bx: f64, by: f64) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(p, q)| ((p.x - q.x).abs() / bx).max((p.y - q.y).abs() / by)).fold(0.0, f64::max)
}

fn lane_error(dec: &Lane, gt: &Lane, bx: f64, by: f64, n_bins: u32) -> f64 {
    match (dec, gt) {
        (Lane::Polyline(a), Lane::Polyline(b)) => point_error(&a.points, &b.points, bx, by),
        (Lane::Polygon(a), Lane::Polygon(b)) => point_error(&a.vertices, &b.vertices, bx, by),
        (Lane::Poly(a), Lane::Poly(b)) => {
            let coeff = a
                .coeffs
                .iter()
                .zip(&b.coeffs)
                .map(|(x, y)| {
                    let p = 1.0 / (1.0 + (-y).exp());
                    let slack = 1.0 / (p * (1.0 - p)) / f64::from(n_bins) * 1.01;
                    (x - y).abs() / slack
                })
                .fold(0.0, f64::max);
            coeff.max((a.offset - b.offset).abs() / by)
        }
        _ => f64::INFINITY,
    }
}

// ---- metrics and rewards ----

fn shifted(l: &PolylineLane, dx: f64, dy: f64, dims: ImageDims) -> PolylineLane {
    PolylineLane {
        points: l
            .points
            .iter()
            .map(|p| Point::new((p.x + dx).clamp(0.0, dims.w()), (p.y + dy).clamp(0.0, dims.h())))
            .collect(),
    }
}

fn shifted_polygon(l: &PolygonLane, dx: f64, dims: ImageDims) -> PolygonLane {
    PolygonLane { vertices: l.vertices.iter().map(|p| Point::new((p.x + dx).clamp(0.0, dims.w()), p.y)).collect() }
}

/// Largest number of pairs with score >= tau, by trying every assignment.
pub fn exhaustive_max_matching(scores: &[Vec<f64>], n_gts: usize, tau: f64) -> usize {
    fn go(i: usize, scores: &[Vec<f64>], used: &mut Vec<bool>, tau: f64) -> usize {
        if i == scores.len() {
            return 0;
        }
        let mut best = go(i + 1, scores, used, tau);
        for g in 0..used.len() {
            if !used[g] && scores[i][g] >= tau {
                used[g] = true;
                best = best.max(1 + go(i + 1, scores, used, tau));
                used[g] = false;
            }
        }
        best
    }
    go(0, scores, &mut vec![false; n_gts], tau)
}

/// A perturbed prediction set for a scene: shifted copies, dropped lanes
/// and a stray lane borrowed from another scene.
fn perturbed_preds(rec: &SceneRecord, other: &SceneRecord, rng: &mut ChaCha8Rng) -> Vec<PolylineLane> {
    let dims = rec.dims();
    let mut preds = Vec::new();
    for l in &rec.polylines {
        if rng.random_bool(0.85) {
            let (dx, dy) = (rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0));
            preds.push(shifted(l, dx, dy, dims));
        }
    }
    if rng.random_bool(0.5) {
        if let Some(l) = other.polylines.first() {
            preds.push(l.clone());
        }
    }
    preds.truncate(4);
    preds
}

/// 201 scenes with 0 to 4 lanes; consecutive pairs give 200 test cases.
fn oracle_scenes(seed: u64) -> Vec<SceneRecord> {
    let spec = SceneSpec { seed: seed ^ 0x3e7, lane_count: (0, 4), ..SceneSpec::default() };
    (0..201).map(|i| generate_scene(&spec, i)).collect()
}

fn metric_oracles(rec: &mut Recorder, seed: u64) {
    let scenes = oracle_scenes(seed);
    let dims = scenes[0].dims();
    let mp = MatchParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e8);

    let (mut greedy_gap, mut matched) = (0, 0);
    for w in scenes.windows(2) {
        let preds = perturbed_preds(&w[0], &w[1], &mut rng);
        let gts = &w[0].polylines;
        let scores = pairwise_liou(&preds, gts, dims, &mp.liou);
        let greedy = greedy_match(&scores, gts.len(), mp.tau).k();
        matched += greedy;
        if greedy != exhaustive_max_matching(&scores, gts.len(), mp.tau) {
            greedy_gap += 1;
        }
    }
    rec.holds("greedy_equals_exhaustive_200_scenes", greedy_gap);
    // guards against a fixture where nothing ever matches
    rec.push("greedy_total_matches", matched as f64, "> 0".into(), matched > 0);

    let lp = LineIouParams::default();
    let lanes: Vec<&PolylineLane> = scenes.iter().flat_map(|s| &s.polylines).take(200).collect();
    let (mut ident, mut symm, mut bounds, mut mono) = (0, 0, 0, 0);
    for (i, a) in lanes.iter().enumerate() {
        let b = lanes[(i * 7 + 3) % lanes.len()];
        let aa = lane_iou(*a, *a, dims, &lp).expect("same grid");
        let ab = lane_iou(*a, b, dims, &lp).expect("same grid");
        let ba = lane_iou(b, *a, dims, &lp).expect("same grid");
        ident += usize::from(aa != 1.0);
        symm += usize::from((ab - ba).abs() > 1e-12);
        bounds += usize::from(!(-1.0..=1.0).contains(&ab));
        let mut prev = 1.0;
        for k in 1..=12 {
            let v = lane_iou(*a, &shifted(a, 0.5 * f64::from(k), 0.0, dims), dims, &lp).expect("same grid");
            mono += usize::from(v > prev + 1e-12);
            prev = v;
        }
    }
    rec.holds("liou_identity", ident);
    rec.holds("liou_symmetry", symm);
    rec.holds("liou_bounds", bounds);
    rec.holds("liou_monotone_translation", mono);

    let polys: Vec<&PolygonLane> = scenes.iter().flat_map(|s| &s.polygons).take(100).collect();
    let (mut ident, mut symm, mut bounds, mut mono) = (0, 0, 0, 0);
    for (i, a) in polys.iter().enumerate() {
        let b = polys[(i * 5 + 1) % polys.len()];
        let ma = rasterize_polygon(a, dims);
        let mb = rasterize_polygon(b, dims);
        let aa = mask_iou(&ma, &ma).expect("same dims");
        let ab = mask_iou(&ma, &mb).expect("same dims");
        let ba = mask_iou(&mb, &ma).expect("same dims");
        ident += usize::from(ma.count() > 0 && aa != 1.0);
        symm += usize::from((ab - ba).abs() > 1e-12);
        bounds += usize::from(!(0.0..=1.0).contains(&ab));
        let mut prev = 1.0;
        for k in 1..=6 {
            let moved = rasterize_polygon(&shifted_polygon(a, f64::from(k), dims), dims);
            let v = mask_iou(&ma, &moved).expect("same dims");
            mono += usize::from(v > prev + 1e-12);
            prev = v;
        }
    }
    rec.holds("miou_identity", ident);
    rec.holds("miou_symmetry", symm);
    rec.holds("miou_bounds", bounds);
    rec.holds("miou_monotone_translation", mono);

    rec.near("tusimple_threshold_vertical", tusimple_threshold(0.0), 20.0, 1e-12);
    rec.near("tusimple_threshold_45deg", tusimple_threshold(std::f64::consts::FRAC_PI_4), 28.28, 0.01);
}

fn reward_properties(rec: &mut Recorder, seed: u64) {
    let scenes = oracle_scenes(seed);
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0x3e9);
    let w = RewardWeights::default();
    let mp = MatchParams::default();
    let dims = scenes[0].dims();
    let (mut worst_decomp, mut fp_violations, mut bound_violations) = (0.0f64, 0, 0);
    for (i, s) in scenes.iter().enumerate().take(200) {
        let other = &scenes[(i + 1) % scenes.len()];
        for fmt in SequenceFormat::ALL {
            let gts = s.lanes_for(fmt);
            let preds = perturbed_lanes(&gts, dims, rng);
            let r = reward_lanes(fmt, &preds, &gts, dims, &w, &mp);
            worst_decomp = worst_decomp.max((r.total - r.recompute()).abs());
            // every matched pair has Line-IoU >= tau
            let hi = if fmt == SequenceFormat::Parameter { 1.0 } else { 2.0 };
            let lo = mp.tau - w.fp_weight(fmt);
            if r.k > 0 && !(lo - 1e-12..=hi + 1e-12).contains(&r.total) {
                bound_violations += 1;
            }
            // one more prediction that matches nothing in this scene
            let mut more = preds.clone();
            let stray = other.lanes_for(fmt).into_iter().find(|l| {
                gts.iter().all(|g| lane_iou(l, g, dims, &mp.liou).is_ok_and(|v| v < mp.tau))
            });
            if let Some(l) = stray {
                more.push(l);
                let r2 = reward_lanes(fmt, &more, &gts, dims, &w, &mp);
                // strict unless every prediction was already a false positive
                let strict = r.k > 0 || preds.is_empty();
                if (strict && r2.total >= r.total) || r2.total > r.total {
                    fp_violations += 1;
                }
            }
        }
    }
    rec.at_most("reward_decomposable_max_abs_error", worst_decomp, 1e-9);
    rec.holds("reward_added_fp_decreases", fp_violations);
    rec.holds("reward_bounds", bound_violations);
    rec.near("combined_objective_defaults_111", combined_objective(1.0, 1.0, 1.0, &w), 2.7, 1e-12);
}

fn perturbed_lanes(gts: &[Lane], dims: ImageDims, rng: &mut ChaCha8Rng) -> Vec<Lane> {
    let mut out = Vec::new();
    for l in gts {
        if !rng.random_bool(0.8) {
            continue;
        }
        let dx = rng.random_range(-4.0..4.0);
        out.push(match l {
            Lane::Polyline(p) => Lane::Polyline(shifted(p, dx, 0.0, dims)),
            Lane::Polygon(p) => Lane::Polygon(shifted_polygon(p, dx, dims)),
            Lane::Poly(p) => {
                let mut q: PolyLane = p.clone();
                q.coeffs[0] += dx / dims.w();
                Lane::Poly(q)
            }
        });
    }
    out
}

// ---- gradients ----

fn gradcheck_suite(rec: &mut Recorder, opts: &VerifyOptions) {
    match run_toy_gradcheck(opts.seed, opts.fault) {
        Ok(r) => {
            for t in &r.tensors {
                rec.below(&format!("rel_error.{}", t.name), t.max_relative_error, MAX_RELATIVE_ERROR);
            }
            rec.below("max_relative_error", r.max_relative_error, MAX_RELATIVE_ERROR);
        }
        Err(e) => {
            log::error!("gradcheck failed to run: {e}");
            rec.push("max_relative_error", f64::NAN, format!("< {MAX_RELATIVE_ERROR}"), false);
        }
    }
}

// ---- REINFORCE ----

pub const REINFORCE_DRAWS: usize = 50_000;

fn reinforce_suite(rec: &mut Recorder, seed: u64) {
    let p = reference_policy();
    let exact = p.exact_gradient(offset_reward);
    let with = estimate_gradient(&p, offset_reward, REINFORCE_DRAWS, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), true);
    let without = estimate_gradient(&p, offset_reward, REINFORCE_DRAWS, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), false);
    let worst_z = exact
        .iter()
        .enumerate()
        .map(|(i, e)| (with.mean[i] - e).abs() / with.standard_error(i))
        .fold(0.0, f64::max);
    rec.at_most("max_abs_z_vs_enumeration", worst_z, 3.0);
    let ratio = with.total_variance() / without.total_variance();
    rec.below("baseline_variance_ratio", ratio, 1.0);
}
