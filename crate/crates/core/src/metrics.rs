//! Prediction/ground-truth matching and the evaluation metrics: precision,
//! recall, F1, Tusimple accuracy and false-positive rate.

use serde::{Deserialize, Serialize};

use crate::geometry::{line_iou, sample_rows, ImageDims, LineIouParams, PolylineLane, RowSampled, SampledLane};

pub const DEFAULT_TAU: f64 = 0.5;
pub const TUSIMPLE_BASE_THRESHOLD: f64 = 20.0;

/// Matching threshold plus the Line-IoU sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub tau: f64,
    #[serde(flatten)]
    pub liou: LineIouParams,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, liou: LineIouParams::default() }
    }
}

impl MatchParams {
    pub fn with_tau(tau: f64) -> Self {
        Self { tau, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub liou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub fp_indices: Vec<usize>,
    pub fn_indices: Vec<usize>,
}

impl MatchResult {
    /// Number of true positives.
    pub fn k(&self) -> usize {
        self.pairs.len()
    }
}

fn sample_all<L: RowSampled>(lanes: &[L], dims: ImageDims, n_rows: usize) -> Vec<SampledLane> {
    lanes
        .iter()
        .map(|l| sample_rows(l, dims, n_rows.max(2)).expect("n_rows >= 2"))
        .collect()
}

/// Pairwise Line-IoU matrix, `scores[p][g]`. Predictions absent on every
/// row score -inf so they can never match.
pub fn pairwise_liou<P: RowSampled, G: RowSampled>(
    preds: &[P],
    gts: &[G],
    dims: ImageDims,
    params: &LineIouParams,
) -> Vec<Vec<f64>> {
    let e = params.half_width(dims);
    let sp = sample_all(preds, dims, params.n_rows);
    let sg = sample_all(gts, dims, params.n_rows);
    sp.iter()
        .map(|p| {
            sg.iter()
                .map(|g| {
                    if p.is_empty() || g.is_empty() {
                        f64::NEG_INFINITY
                    } else {
                        line_iou(p, g, e).expect("same row grid")
                    }
                })
                .collect()
        })
        .collect()
}

/// Greedy one-to-one matching on a precomputed score matrix: repeatedly take
/// the best remaining pair with score >= tau; ties broken by (pred, gt) index.
pub fn greedy_match(scores: &[Vec<f64>], n_gts: usize, tau: f64) -> MatchResult {
    let mut cands: Vec<MatchedPair> = scores
        .iter()
        .enumerate()
        .flat_map(|(p, row)| row.iter().enumerate().map(move |(g, s)| MatchedPair { pred: p, gt: g, liou: *s }))
        .filter(|c| c.liou >= tau)
        .collect();
    cands.sort_by(|a, b| b.liou.total_cmp(&a.liou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));

    let mut pred_used = vec![false; scores.len()];
    let mut gt_used = vec![false; n_gts];
    let mut pairs = Vec::new();
    for c in cands {
        if !pred_used[c.pred] && !gt_used[c.gt] {
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            pairs.push(c);
        }
    }
    let fp_indices = (0..scores.len()).filter(|i| !pred_used[*i]).collect();
    let fn_indices = (0..n_gts).filter(|i| !gt_used[*i]).collect();
    MatchResult { pairs, fp_indices, fn_indices }
}

pub fn match_lanes<P: RowSampled, G: RowSampled>(
    preds: &[P],
    gts: &[G],
    dims: ImageDims,
    params: &MatchParams,
) -> MatchResult {
    let scores = pairwise_liou(preds, gts, dims, &params.liou);
    greedy_match(&scores, gts.len(), params.tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "format,precision,recall,f1,tp,fp,fn,accuracy";

    pub fn csv_row(&self, format: &str) -> String {
        format!(
            "{format},{},{},{},{},{},{},{}",
            self.precision,
            self.recall,
            self.f1,
            self.tp,
            self.fp,
            self.fn_,
            self.accuracy.map(|a| a.to_string()).unwrap_or_default()
        )
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> EvalReport {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    EvalReport { precision, recall, f1, tp, fp, fn_, accuracy: None }
}

/// False-positive rate of one scene: unmatched predictions over max(1, n_preds).
pub fn fp_rate(m: &MatchResult, n_preds: usize) -> f64 {
    m.fp_indices.len() as f64 / n_preds.max(1) as f64
}

/// Running TP/FP/FN totals over many scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn from_match(m: &MatchResult) -> Self {
        Self { tp: m.k(), fp: m.fp_indices.len(), fn_: m.fn_indices.len() }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn report(&self) -> EvalReport {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }
}

/// Correct and total ground-truth points of the Tusimple accuracy metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PointCounts {
    pub correct: usize,
    pub total: usize,
}

impl PointCounts {
    pub fn add(&mut self, o: PointCounts) {
        self.correct += o.correct;
        self.total += o.total;
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }
}

/// Angle of the gt polyline from vertical at each keypoint, by central
/// differences (one-sided at the ends).
pub fn local_angles(gt: &PolylineLane) -> Vec<f64> {
    let p = &gt.points;
    let n = p.len();
    (0..n)
        .map(|k| {
            let (a, b) = match (k, n) {
                (_, 0 | 1) => return 0.0,
                (0, _) => (p[0], p[1]),
                (k, n) if k == n - 1 => (p[n - 2], p[n - 1]),
                (k, _) => (p[k - 1], p[k + 1]),
            };
            (b.x - a.x).abs().atan2((b.y - a.y).abs())
        })
        .collect()
}

/// Per-point threshold `20 / cos(a_yl)`.
pub fn tusimple_threshold(angle: f64) -> f64 {
    TUSIMPLE_BASE_THRESHOLD / angle.cos()
}

/// Tusimple point counts for one scene. Each gt lane is scored against the
/// prediction that gets the most of its points right.
pub fn tusimple_points<P: RowSampled>(preds: &[P], gts: &[PolylineLane], dims: ImageDims) -> PointCounts {
    let mut counts = PointCounts::default();
    for gt in gts {
        let thresholds: Vec<f64> = local_angles(gt).into_iter().map(tusimple_threshold).collect();
        let best = preds
            .iter()
            .map(|pred| {
                gt.points
                    .iter()
                    .zip(&thresholds)
                    .filter(|(g, t)| pred.x_at(g.y, dims).is_some_and(|x| (x - g.x).abs() < **t))
                    .count()
            })
            .max()
            .unwrap_or(0);
        counts.correct += best;
        counts.total += gt.points.len();
    }
    counts
}

/// Tusimple accuracy over a set of scenes `(preds, gts)`.
pub fn tusimple_accuracy<'a, P: RowSampled + 'a>(
    scenes: impl IntoIterator<Item = (&'a [P], &'a [PolylineLane])>,
    dims: ImageDims,
) -> f64 {
    let mut total = PointCounts::default();
    for (preds, gts) in scenes {
        total.add(tusimple_points(preds, gts, dims));
    }
    total.accuracy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn dims() -> ImageDims {
        ImageDims::new(800, 320).unwrap()
    }

    fn vertical(x: f64) -> PolylineLane {
        PolylineLane { points: (0..14).map(|k| Point::new(x, 40.0 + 20.0 * k as f64)).collect() }
    }

    #[test]
    fn identical_sets_match_fully() {
        let gts = vec![vertical(100.0), vertical(300.0), vertical(500.0)];
        let m = match_lanes(&gts, &gts, dims(), &MatchParams::default());
        assert_eq!(m.k(), 3);
        assert!(m.fp_indices.is_empty() && m.fn_indices.is_empty());
        assert!(m.pairs.iter().all(|p| p.pred == p.gt && p.liou == 1.0));
    }

    #[test]
    fn far_prediction_is_fp_and_fn() {
        let m = match_lanes(&[vertical(100.0)], &[vertical(600.0)], dims(), &MatchParams::default());
        assert_eq!(m.k(), 0);
        assert_eq!(m.fp_indices, vec![0]);
        assert_eq!(m.fn_indices, vec![0]);
    }

    #[test]
    fn greedy_on_cross_scores() {
        let scores = vec![vec![0.9, 0.6], vec![0.7, 0.8]];
        let m = greedy_match(&scores, 2, 0.5);
        let pairs: Vec<_> = m.pairs.iter().map(|p| (p.pred, p.gt)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        // exhaustive: identity assignment scores 1.7 vs 1.3 for the swap
        assert!(0.9 + 0.8 > 0.6 + 0.7);
    }

    #[test]
    fn greedy_tie_break_is_by_index() {
        let scores = vec![vec![0.7, 0.7], vec![0.7, 0.7]];
        let m = greedy_match(&scores, 2, 0.5);
        let pairs: Vec<_> = m.pairs.iter().map(|p| (p.pred, p.gt)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn f1_examples() {
        let r = f1_from_counts(1, 1, 0);
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        let z = f1_from_counts(0, 0, 0);
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        let r = f1_from_counts(7, 3, 1);
        assert!((r.precision - 0.7).abs() < 1e-12);
        assert!((r.recall - 0.875).abs() < 1e-12);
        assert!((r.f1 - 2.0 * 0.7 * 0.875 / 1.575).abs() < 1e-12);
        assert!((r.f1 - 0.777_777_777_777_777_8).abs() < 1e-12);
    }

    #[test]
    fn fp_rate_examples() {
        let none = MatchResult::default();
        assert_eq!(fp_rate(&none, 0), 0.0);
        let one = MatchResult { fp_indices: vec![2], ..Default::default() };
        assert_eq!(fp_rate(&one, 4), 0.25);
        let all = MatchResult { fp_indices: vec![0, 1, 2], ..Default::default() };
        assert_eq!(fp_rate(&all, 3), 1.0);
    }

    #[test]
    fn tusimple_vertical_threshold() {
        let d = dims();
        let gt = vec![vertical(300.0)];
        assert_eq!(tusimple_threshold(0.0), 20.0);
        assert_eq!(tusimple_accuracy([(&gt[..], &gt[..])], d), 1.0);
        let off19 = vec![vertical(319.0)];
        assert_eq!(tusimple_accuracy([(&off19[..], &gt[..])], d), 1.0);
        let off21 = vec![vertical(321.0)];
        assert_eq!(tusimple_accuracy([(&off21[..], &gt[..])], d), 0.0);
    }

    #[test]
    fn tusimple_45_degrees() {
        let d = dims();
        let diag = |off: f64| PolylineLane {
            points: (0..14).map(|k| {
                let y = 40.0 + 20.0 * k as f64;
                Point::new(100.0 + y + off, y)
            })
            .collect(),
        };
        let gt = vec![diag(0.0)];
        for a in local_angles(&gt[0]) {
            assert!((a - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        }
        let t = tusimple_threshold(std::f64::consts::FRAC_PI_4);
        assert!((t - 28.284_271_247_461_9).abs() < 1e-9);
        let pred = vec![diag(25.0)];
        assert_eq!(tusimple_accuracy([(&pred[..], &gt[..])], d), 1.0);
    }

    #[test]
    fn empty_prediction_never_matches() {
        let empty = PolylineLane { points: vec![Point::new(1.0, 500.0), Point::new(1.0, 600.0)] };
        let m = match_lanes(&[empty], &[vertical(300.0)], dims(), &MatchParams::with_tau(0.01));
        assert_eq!(m.k(), 0);
    }
}
