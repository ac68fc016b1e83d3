use laneseq_core::codec::SequenceFormat;
use laneseq_core::geometry::Lane;
use laneseq_core::metrics::{match_lanes, Counts, EvalReport, MatchParams};
use laneseq_core::rewards::{combined_objective, reward_lanes, RewardWeights};
use laneseq_model::LaneTransformer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{scene_codec, Example};
use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FormatEval {
    pub report: EvalReport,
    /// Mean metric reward of the greedy prediction.
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Indexed by `SequenceFormat::index`.
    pub formats: [FormatEval; 3],
    pub combined_reward: f64,
}

impl EvalSummary {
    pub fn get(&self, fmt: SequenceFormat) -> &FormatEval {
        &self.formats[fmt.index()]
    }

    pub fn mean_f1(&self) -> f64 {
        self.formats.iter().map(|f| f.report.f1).sum::<f64>() / 3.0
    }
}

/// Greedy predictions of one image in every format.
pub fn predict(model: &LaneTransformer, ex: &Example) -> Result<[Vec<Lane>; 3], TrainError> {
    let enc = model.encode(&ex.image)?;
    let codec = scene_codec(model.vocab(), ex.dims, usize::MAX);
    let mut out: [Vec<Lane>; 3] = Default::default();
    for fmt in SequenceFormat::ALL {
        let seq = model.greedy_decode(&enc, fmt)?;
        out[fmt.index()] = codec.decode(&seq.tokens).map(|d| d.lanes).unwrap_or_default();
    }
    Ok(out)
}

/// Greedy decoding of every held-out image, scored per format.
pub fn evaluate(model: &LaneTransformer, examples: &[Example], tau: f64, weights: &RewardWeights) -> Result<EvalSummary, TrainError> {
    let params = MatchParams::with_tau(tau);
    let per_image: Vec<Result<[(Counts, f64); 3], TrainError>> = examples
        .par_iter()
        .map(|ex| {
            let preds = predict(model, ex)?;
            Ok(SequenceFormat::ALL.map(|fmt| {
                let (p, g) = (&preds[fmt.index()], ex.gt(fmt));
                let counts = Counts::from_match(&match_lanes(p, g, ex.dims, &params));
                (counts, reward_lanes(fmt, p, g, ex.dims, weights, &params).total)
            }))
        })
        .collect();
    let mut counts = [Counts::default(); 3];
    let mut rewards = [0.0; 3];
    for r in per_image {
        for (i, (c, rw)) in r?.into_iter().enumerate() {
            counts[i].add(c);
            rewards[i] += rw;
        }
    }
    let n = examples.len().max(1) as f64;
    let formats: [FormatEval; 3] = std::array::from_fn(|i| FormatEval { report: counts[i].report(), reward: rewards[i] / n });
    let combined_reward = combined_objective(formats[0].reward, formats[1].reward, formats[2].reward, weights);
    Ok(EvalSummary { formats, combined_reward })
}
