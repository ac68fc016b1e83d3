//! Finite-difference verification of the autodiff gradients on a toy model.

use laneseq_core::codec::{SequenceFormat, Token, TokenSequence};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Fault, Graph};
use crate::config::ModelConfig;
use crate::transformer::LaneTransformer;
use crate::ModelError;

/// Acceptance bound on the per-tensor maximum relative error.
pub const MAX_RELATIVE_ERROR: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely; key biases have an exactly
/// zero gradient, leaving only difference noise of order 1e-10.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Embed 16, one layer each side, vocabulary of 26 tokens.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 8,
        embed_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 32,
        n_bins: 20,
        max_seq_len: 24,
        // larger than the training init so encoder gradients stay well above
        // finite-difference roundoff
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn toy_sequences(model: &LaneTransformer, rng: &mut ChaCha8Rng) -> Vec<TokenSequence> {
    let v = model.vocab();
    SequenceFormat::ALL
        .iter()
        .map(|fmt| {
            let mut t = vec![v.start(), v.format_token(*fmt)];
            for i in 0..12 {
                t.push(if i % 6 == 5 { v.lane() } else { Token(rng.random_range(1..=v.n_bins)) });
            }
            t.push(v.end());
            TokenSequence { format: *fmt, tokens: t }
        })
        .collect()
}

fn total_loss(model: &LaneTransformer, image: &Array2<f64>, seqs: &[TokenSequence]) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let enc = model.encode_graph(&mut g, image)?;
    let mem = model.memory_graph(&mut g, enc)?;
    let mut total = 0.0;
    for s in seqs {
        let (i, t) = s.teacher_forcing_pair();
        let l = model.sequence_loss_graph(&mut g, mem, i, t)?;
        total += g.scalar(l);
    }
    Ok(total)
}

/// Compares every parameter's autodiff gradient with central differences.
pub fn gradcheck(model: &LaneTransformer, image: &Array2<f64>, seqs: &[TokenSequence], fault: Fault) -> Result<GradcheckReport, ModelError> {
    let mut g = Graph::new();
    g.set_fault(fault);
    let enc = model.encode_graph(&mut g, image)?;
    let mem = model.memory_graph(&mut g, enc)?;
    let mut total = None;
    for s in seqs {
        let (i, t) = s.teacher_forcing_pair();
        let l = model.sequence_loss_graph(&mut g, mem, i, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| ModelError::Config("gradcheck needs at least one sequence".into()))?;
    let grads = g.backward(total)?;

    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for (id, p) in model.store.iter() {
        let zeros = Array2::zeros(p.value.raw_dim());
        let analytic = grads.get(id).unwrap_or(&zeros);
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for idx in ndarray::indices(p.value.dim()) {
            let orig = p.value[idx];
            let mut at = |d: f64| -> Result<f64, ModelError> {
                probe.store.get_mut(id).value[idx] = orig + d;
                total_loss(&probe, image, seqs)
            };
            // fourth-order central difference
            let numeric = (8.0 * (at(STEP)? - at(-STEP)?) - (at(2.0 * STEP)? - at(-2.0 * STEP)?)) / (12.0 * STEP);
            probe.store.get_mut(id).value[idx] = orig;
            let a = analytic[idx];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(FLOOR));
        }
        tensors.push(TensorCheck { name: p.name.clone(), elements: p.value.len(), max_relative_error: max_rel, max_abs_error: max_abs });
    }
    let max_relative_error = tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport { tensors, max_relative_error, passed: max_relative_error < MAX_RELATIVE_ERROR })
}

/// Gradient check of the toy configuration on a random image and sequences.
pub fn run_toy_gradcheck(seed: u64, fault: Fault) -> Result<GradcheckReport, ModelError> {
    let model = LaneTransformer::new(toy_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let c = &model.config;
    let image = Array2::from_shape_simple_fn((c.image_height as usize, c.image_width as usize), || rng.random_range(-1.0..1.0));
    let seqs = toy_sequences(&model, &mut rng);
    gradcheck(&model, &image, &seqs, fault)
}
