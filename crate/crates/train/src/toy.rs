//! Enumerable toy policy for checking the REINFORCE estimator exactly.
//!
//! Tokens 0..3 with token 3 ending the sequence; at most 3 tokens. The next
//! token's logits depend only on the previous token (or the start state),
//! giving a 4x4 logit table.

use laneseq_model::autodiff::Graph;
use laneseq_model::transformer::sample_index;
use laneseq_model::ParameterStore;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::reinforce::SequencePolicy;

pub const TOY_VOCAB: usize = 4;
pub const TOY_END: usize = 3;
pub const TOY_MAX_LEN: usize = 3;
const START_STATE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub store: ParameterStore,
}

impl TabularPolicy {
    pub fn new(logits: Array2<f64>) -> Self {
        assert_eq!(logits.dim(), (TOY_VOCAB, TOY_VOCAB));
        let mut store = ParameterStore::new();
        store.insert("table", logits).expect("fresh store");
        Self { store }
    }

    fn table(&self) -> &Array2<f64> {
        &self.store.by_name("table").expect("table").value
    }

    fn states(seq: &[usize]) -> Vec<usize> {
        std::iter::once(START_STATE).chain(seq.iter().copied()).take(seq.len()).collect()
    }

    /// Exact log-probability of a complete sequence.
    pub fn log_prob(&self, seq: &[usize]) -> f64 {
        let t = self.table();
        Self::states(seq)
            .iter()
            .zip(seq)
            .map(|(&s, &tok)| {
                let row = t.row(s);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row[tok] - lse
            })
            .sum()
    }

    /// Every complete sequence: ends with the end token, or reaches the length cap.
    pub fn all_sequences() -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut frontier = vec![Vec::new()];
        while let Some(prefix) = frontier.pop() {
            for tok in 0..TOY_VOCAB {
                let mut s: Vec<usize> = prefix.clone();
                s.push(tok);
                if tok == TOY_END || s.len() == TOY_MAX_LEN {
                    out.push(s);
                } else {
                    frontier.push(s);
                }
            }
        }
        out.sort();
        out
    }

    /// `grad sum_t Q(t) R(t)` by enumeration.
    pub fn exact_gradient(&self, reward: impl Fn(&Vec<usize>) -> f64) -> Vec<f64> {
        let mut g = vec![0.0; TOY_VOCAB * TOY_VOCAB];
        for s in Self::all_sequences() {
            let w = self.log_prob(&s).exp() * reward(&s);
            for (gi, si) in g.iter_mut().zip(self.grad_log_prob(&s)) {
                *gi += w * si;
            }
        }
        g
    }
}

impl SequencePolicy for TabularPolicy {
    type Sample = Vec<usize>;

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let t = self.table();
        let mut seq = Vec::with_capacity(TOY_MAX_LEN);
        let mut state = START_STATE;
        while seq.len() < TOY_MAX_LEN {
            let tok = sample_index(&t.row(state), 1.0, rng);
            seq.push(tok);
            if tok == TOY_END {
                break;
            }
            state = tok;
        }
        seq
    }

    /// Computed with the same autodiff cross-entropy op the transformer uses.
    fn grad_log_prob(&self, sample: &Vec<usize>) -> Vec<f64> {
        let mut g = Graph::new();
        let id = self.store.id("table").expect("table");
        let table = g.param(&self.store, id);
        let logits = g.gather_rows(table, &Self::states(sample)).expect("valid states");
        let nll = g.cross_entropy(logits, sample, &vec![1.0; sample.len()]).expect("valid targets");
        let grads = g.backward(nll).expect("fresh graph");
        grads.flatten(&self.store).into_iter().map(|x| -x).collect()
    }
}

/// Offset reward in [2, 3.1] over toy sequences; the offset is what a
/// baseline removes.
pub fn offset_reward(seq: &Vec<usize>) -> f64 {
    let body: usize = seq.iter().enumerate().map(|(i, t)| (i + 1) * (t + 1)).sum();
    let ended = seq.last() == Some(&TOY_END);
    2.0 + (body % 7) as f64 / 7.0 + if ended { 0.1 } else { 0.0 }
}

/// Fixed non-uniform logit table used by the estimator checks.
pub fn reference_policy() -> TabularPolicy {
    TabularPolicy::new(Array2::from_shape_fn((4, 4), |(i, j)| ((3 * i + 2 * j) % 5) as f64 / 3.0 - 0.5))
}
