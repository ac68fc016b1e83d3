//! Per-format metric rewards and the weighted multi-format objective.

use serde::{Deserialize, Serialize};

use crate::codec::SequenceFormat;
use crate::geometry::{
    keypoint_distance, mask_iou, rasterize_polygon, ImageDims, Lane, PolyLane, PolygonLane, PolylineLane,
};
use crate::metrics::{fp_rate, match_lanes, MatchParams, MatchResult};

/// FP-penalty weights (`lambda1..3`) and per-format objective scales (`lambda4..6`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { lambda1: 0.3, lambda2: 0.3, lambda3: 0.1, lambda4: 0.2, lambda5: 1.0, lambda6: 1.5 }
    }
}

impl RewardWeights {
    pub fn fp_weight(&self, fmt: SequenceFormat) -> f64 {
        match fmt {
            SequenceFormat::Segmentation => self.lambda1,
            SequenceFormat::Anchor => self.lambda2,
            SequenceFormat::Parameter => self.lambda3,
        }
    }

    pub fn objective_scale(&self, fmt: SequenceFormat) -> f64 {
        match fmt {
            SequenceFormat::Segmentation => self.lambda4,
            SequenceFormat::Anchor => self.lambda5,
            SequenceFormat::Parameter => self.lambda6,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6]
            .iter()
            .all(|l| l.is_finite() && *l >= 0.0)
    }
}

/// Components of one true-positive pair's reward term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTerms {
    pub pred: usize,
    pub gt: usize,
    pub liou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_r: Option<f64>,
}

impl PairTerms {
    pub fn value(&self) -> f64 {
        self.liou + self.miou.unwrap_or(0.0) + self.d_r.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: SequenceFormat,
    pub total: f64,
    pub per_tp_terms: Vec<PairTerms>,
    /// `lambda * FP rate`, already weighted.
    pub fp_penalty: f64,
    pub k: usize,
}

impl RewardBreakdown {
    fn assemble(format: SequenceFormat, per_tp_terms: Vec<PairTerms>, fp_penalty: f64) -> Self {
        let k = per_tp_terms.len();
        let mut out = Self { format, total: 0.0, per_tp_terms, fp_penalty, k };
        out.total = out.recompute();
        out
    }

    /// Total rebuilt from the components. The matched-sum term is 0 when K = 0.
    pub fn recompute(&self) -> f64 {
        let matched = if self.k == 0 {
            0.0
        } else {
            self.per_tp_terms.iter().map(PairTerms::value).sum::<f64>() / self.k as f64
        };
        matched - self.fp_penalty
    }
}

fn fp_penalty(m: &MatchResult, n_preds: usize, weight: f64) -> f64 {
    weight * fp_rate(m, n_preds)
}

/// Matched Line-IoU plus matched mask IoU, minus the weighted FP rate.
pub fn reward_segmentation(
    preds: &[PolygonLane],
    gts: &[PolygonLane],
    dims: ImageDims,
    weights: &RewardWeights,
    params: &MatchParams,
) -> RewardBreakdown {
    let m = match_lanes(preds, gts, dims, params);
    let terms = m
        .pairs
        .iter()
        .map(|pair| {
            let (p, g) = (&preds[pair.pred], &gts[pair.gt]);
            let miou = mask_iou(&rasterize_polygon(p, dims), &rasterize_polygon(g, dims)).expect("same dims");
            PairTerms { pred: pair.pred, gt: pair.gt, liou: pair.liou, miou: Some(miou), d_r: None }
        })
        .collect();
    RewardBreakdown::assemble(SequenceFormat::Segmentation, terms, fp_penalty(&m, preds.len(), weights.lambda1))
}

/// `d_r = 1 - d / H`, clamped to [0, 1].
pub fn rescaled_distance(d: f64, dims: ImageDims) -> f64 {
    (1.0 - d / dims.h()).clamp(0.0, 1.0)
}

/// Matched Line-IoU plus rescaled keypoint distance, minus the weighted FP rate.
pub fn reward_anchor(
    preds: &[PolylineLane],
    gts: &[PolylineLane],
    dims: ImageDims,
    weights: &RewardWeights,
    params: &MatchParams,
) -> RewardBreakdown {
    let m = match_lanes(preds, gts, dims, params);
    let terms = m
        .pairs
        .iter()
        .map(|pair| {
            let d = keypoint_distance(&preds[pair.pred], &gts[pair.gt], dims).unwrap_or(dims.h());
            PairTerms {
                pred: pair.pred,
                gt: pair.gt,
                liou: pair.liou,
                miou: None,
                d_r: Some(rescaled_distance(d, dims)),
            }
        })
        .collect();
    RewardBreakdown::assemble(SequenceFormat::Anchor, terms, fp_penalty(&m, preds.len(), weights.lambda2))
}

/// Matched Line-IoU minus the weighted FP rate.
pub fn reward_parameter(
    preds: &[PolyLane],
    gts: &[PolyLane],
    dims: ImageDims,
    weights: &RewardWeights,
    params: &MatchParams,
) -> RewardBreakdown {
    let m = match_lanes(preds, gts, dims, params);
    let terms = m
        .pairs
        .iter()
        .map(|pair| PairTerms { pred: pair.pred, gt: pair.gt, liou: pair.liou, miou: None, d_r: None })
        .collect();
    RewardBreakdown::assemble(SequenceFormat::Parameter, terms, fp_penalty(&m, preds.len(), weights.lambda3))
}

/// Dispatches on format. Lanes of a different geometric form are ignored.
pub fn reward_lanes(
    fmt: SequenceFormat,
    preds: &[Lane],
    gts: &[Lane],
    dims: ImageDims,
    weights: &RewardWeights,
    params: &MatchParams,
) -> RewardBreakdown {
    match fmt {
        SequenceFormat::Segmentation => {
            let pick = |ls: &[Lane]| -> Vec<PolygonLane> {
                ls.iter().filter_map(|l| if let Lane::Polygon(p) = l { Some(p.clone()) } else { None }).collect()
            };
            reward_segmentation(&pick(preds), &pick(gts), dims, weights, params)
        }
        SequenceFormat::Anchor => {
            let pick = |ls: &[Lane]| -> Vec<PolylineLane> {
                ls.iter().filter_map(|l| if let Lane::Polyline(p) = l { Some(p.clone()) } else { None }).collect()
            };
            reward_anchor(&pick(preds), &pick(gts), dims, weights, params)
        }
        SequenceFormat::Parameter => {
            let pick = |ls: &[Lane]| -> Vec<PolyLane> {
                ls.iter().filter_map(|l| if let Lane::Poly(p) = l { Some(p.clone()) } else { None }).collect()
            };
            reward_parameter(&pick(preds), &pick(gts), dims, weights, params)
        }
    }
}

/// `lambda4 * seg + lambda5 * anchor + lambda6 * param`.
pub fn combined_objective(seg_obj: f64, anchor_obj: f64, param_obj: f64, weights: &RewardWeights) -> f64 {
    weights.lambda4 * seg_obj + weights.lambda5 * anchor_obj + weights.lambda6 * param_obj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, LineIouParams};

    fn dims() -> ImageDims {
        ImageDims::new(800, 320).unwrap()
    }

    fn band(x: f64) -> PolygonLane {
        let mut v: Vec<Point> = (0..14).map(|k| Point::new(x - 8.0, 40.0 + 20.0 * k as f64)).collect();
        v.extend((0..14).rev().map(|k| Point::new(x + 8.0, 40.0 + 20.0 * k as f64)));
        PolygonLane { vertices: v }
    }

    fn keyed(x: f64) -> PolylineLane {
        PolylineLane { points: (0..14).map(|k| Point::new(x, 40.0 + 20.0 * k as f64)).collect() }
    }

    #[test]
    fn segmentation_examples() {
        let (w, p) = (RewardWeights::default(), MatchParams::default());
        let gt = vec![band(300.0)];
        let r = reward_segmentation(&gt, &gt, dims(), &w, &p);
        assert_eq!(r.total, 2.0);
        let r = reward_segmentation(&[], &gt, dims(), &w, &p);
        assert_eq!((r.total, r.k), (0.0, 0));
        let preds = vec![band(300.0), band(650.0)];
        let r = reward_segmentation(&preds, &gt, dims(), &w, &p);
        assert!((r.total - 1.85).abs() < 1e-12);
        assert!((r.total - r.recompute()).abs() < 1e-12);
    }

    #[test]
    fn anchor_examples() {
        let (w, p) = (RewardWeights::default(), MatchParams::default());
        let gt = vec![keyed(300.0)];
        assert_eq!(reward_anchor(&gt, &gt, dims(), &w, &p).total, 2.0);
        assert_eq!(rescaled_distance(160.0, dims()), 0.5);
        assert_eq!(rescaled_distance(320.0, dims()), 0.0);
        assert_eq!(rescaled_distance(1000.0, dims()), 0.0);
        let t = PairTerms { pred: 0, gt: 0, liou: 0.6, miou: None, d_r: Some(rescaled_distance(160.0, dims())) };
        assert!((t.value() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn parameter_examples() {
        let (w, p) = (RewardWeights::default(), MatchParams::default());
        let lane = |a0: f64| PolyLane { coeffs: [a0, 0.0, 0.0, 0.0, 0.0], offset: 100.0 };
        let gt = vec![lane(0.4)];
        assert_eq!(reward_parameter(&gt, &gt, dims(), &w, &p).total, 1.0);
        let r = reward_parameter(&[lane(0.2), lane(0.7)], &[], dims(), &w, &p);
        assert!((r.total + 0.1).abs() < 1e-12);

        // shift chosen so the per-row liou is exactly 0.8: (2e - dx) / (2e + dx) = 0.8
        let e = LineIouParams::default().half_width(dims());
        let dx = 2.0 * e * 0.2 / 1.8;
        let shifted = lane(0.4 + dx / 800.0);
        let r = reward_parameter(&[shifted, lane(0.9)], &gt, dims(), &w, &p);
        assert_eq!(r.k, 1);
        assert!((r.per_tp_terms[0].liou - 0.8).abs() < 1e-9);
        assert!((r.total - 0.75).abs() < 1e-9);
    }

    #[test]
    fn combined_examples() {
        let w = RewardWeights::default();
        assert!((combined_objective(1.0, 1.0, 1.0, &w) - 2.7).abs() < 1e-12);
        assert_eq!(combined_objective(0.0, 0.0, 0.0, &w), 0.0);
        assert!((combined_objective(2.0, 1.0, 0.0, &w) - 1.4).abs() < 1e-12);
    }
}
