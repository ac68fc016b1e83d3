use laneseq_core::codec::{SceneCodec, SequenceFormat, TokenSequence, Vocabulary};
use laneseq_core::geometry::{ImageDims, Lane};
use laneseq_core::synthdata::{augment, AugmentConfig, SceneRecord};
use laneseq_model::transformer::image_to_input;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::TrainError;

/// One image with ground truth and teacher-forcing targets in every format,
/// indexed by `SequenceFormat::index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub index: u64,
    pub dims: ImageDims,
    pub image: Array2<f64>,
    pub gts: [Vec<Lane>; 3],
    pub targets: [TokenSequence; 3],
}

impl Example {
    pub fn gt(&self, fmt: SequenceFormat) -> &[Lane] {
        &self.gts[fmt.index()]
    }

    pub fn target(&self, fmt: SequenceFormat) -> &TokenSequence {
        &self.targets[fmt.index()]
    }
}

pub fn prepare_example(rec: &SceneRecord, codec: &SceneCodec) -> Result<Example, TrainError> {
    let gts = SequenceFormat::ALL.map(|f| rec.lanes_for(f));
    let mut targets = Vec::with_capacity(3);
    for f in SequenceFormat::ALL {
        targets.push(codec.encode(&gts[f.index()], f)?);
    }
    let targets: [TokenSequence; 3] = targets.try_into().expect("three formats");
    Ok(Example { index: rec.index, dims: rec.dims(), image: image_to_input(&rec.image), gts, targets })
}

pub fn scene_codec(vocab: Vocabulary, dims: ImageDims, max_lanes: usize) -> SceneCodec {
    SceneCodec::new(vocab, dims).with_max_lanes(max_lanes)
}

/// Encodes every record; scenes with more lanes than the codec allows are
/// truncated to the leftmost `max_lanes`.
pub fn prepare_dataset(records: &[SceneRecord], vocab: Vocabulary, max_lanes: usize) -> Result<Vec<Example>, TrainError> {
    records
        .par_iter()
        .map(|r| {
            let codec = scene_codec(vocab, r.dims(), max_lanes);
            prepare_example(&truncate_lanes(r, max_lanes), &codec)
        })
        .collect()
}

fn truncate_lanes(rec: &SceneRecord, max_lanes: usize) -> SceneRecord {
    if rec.lane_count() <= max_lanes {
        return rec.clone();
    }
    let mut r = rec.clone();
    r.polylines.truncate(max_lanes);
    r.polygons.truncate(max_lanes);
    r.params.truncate(max_lanes);
    r
}

/// Deterministic stream for (seed, stage tag, epoch, item).
pub fn item_rng(seed: u64, tag: u64, epoch: usize, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(((epoch as u64) << 32) ^ item);
    rng
}

pub(crate) const AUGMENT_TAG: u64 = 0xa11;

/// Per-epoch augmented copies of the training records.
pub fn augmented_dataset(
    records: &[SceneRecord],
    vocab: Vocabulary,
    max_lanes: usize,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Example>, TrainError> {
    let recs: Vec<SceneRecord> = records
        .par_iter()
        .map(|r| {
            let mut rng = item_rng(seed, AUGMENT_TAG, epoch, r.index);
            let (aug, diags) = augment(r, &mut rng, cfg);
            for d in diags {
                log::debug!("scene {}: {:?}", r.index, d);
            }
            aug
        })
        .collect();
    prepare_dataset(&recs, vocab, max_lanes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use laneseq_core::synthdata::{generate_scene, SceneSpec};

    #[test]
    fn targets_decode_back_to_ground_truth_counts() {
        let spec = SceneSpec::default();
        let recs: Vec<_> = (0..8).map(|i| generate_scene(&spec, i)).collect();
        let vocab = Vocabulary::new(1000);
        let ex = prepare_dataset(&recs, vocab, 4).unwrap();
        for (e, r) in ex.iter().zip(&recs) {
            assert_eq!(e.index, r.index);
            assert_eq!(e.image.dim(), (64, 160));
            for f in SequenceFormat::ALL {
                let codec = scene_codec(vocab, e.dims, 4);
                let dec = codec.decode(&e.target(f).tokens).unwrap();
                assert_eq!(dec.lanes.len(), r.lane_count());
                assert_eq!(e.target(f).format, f);
            }
        }
    }

    #[test]
    fn augmentation_is_seeded_per_epoch() {
        let spec = SceneSpec::default();
        let recs: Vec<_> = (0..4).map(|i| generate_scene(&spec, i)).collect();
        let v = Vocabulary::new(100);
        let cfg = AugmentConfig::default();
        let a = augmented_dataset(&recs, v, 4, &cfg, 1, 0).unwrap();
        let b = augmented_dataset(&recs, v, 4, &cfg, 1, 0).unwrap();
        let c = augmented_dataset(&recs, v, 4, &cfg, 1, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
