//! Patch encoder and autoregressive lane-sequence decoder.

use laneseq_core::codec::{SequenceFormat, Token, TokenSequence, Vocabulary};
use laneseq_core::synthdata::GrayImage;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gelu, layer_norm_rows, log_softmax_pick, softmax_rows, Graph, NodeId};
use crate::config::{CoordInit, ModelConfig};
use crate::params::{truncated_normal, Gradients, ParamId, ParameterStore};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EncoderBlock {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DecoderBlock {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    patch: Linear,
    enc_pos: ParamId,
    enc_blocks: Vec<EncoderBlock>,
    bridge_norm: Norm,
    bridge: Linear,
    tok: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<DecoderBlock>,
    final_norm: Norm,
    head_bias: ParamId,
}

/// Per-patch representations, `n_patches x embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub grid: Array2<f64>,
}

/// A sampled continuation of a format prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub tokens: TokenSequence,
    pub log_prob: f64,
    /// Log-probability (temperature 1) of each generated token.
    pub per_step_log_probs: Vec<f64>,
}

/// Number of leading prompt tokens (`START`, format) in every sequence.
pub const PROMPT_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LaneTransformer {
    pub config: ModelConfig,
    pub store: ParameterStore,
    layout: Layout,
}

/// Converts 8-bit pixels to the centred range the encoder expects.
pub fn image_to_input(img: &GrayImage) -> Array2<f64> {
    Array2::from_shape_fn((img.height as usize, img.width as usize), |(y, x)| {
        f64::from(img.pixels[y * img.width as usize + x]) / 127.5 - 1.0
    })
}

/// Loss weight per target: 0 for format tokens and padding, else 1.
pub fn target_weights(vocab: &Vocabulary, targets: &[Token]) -> Vec<f64> {
    targets.iter().map(|t| if vocab.is_format(*t) || *t == Token::PAD { 0.0 } else { 1.0 }).collect()
}

fn sinusoidal_coords(n_bins: usize, dim: usize, std: f64) -> Array2<f64> {
    let half = dim / 2;
    let max_cycles = (n_bins as f64 / 16.0).max(1.0);
    Array2::from_shape_fn((n_bins, dim), |(t, c)| {
        let u = (t as f64 + 0.5) / n_bins as f64;
        let k = (c / 2).min(half.saturating_sub(1));
        let cycles = 0.5 * (2.0 * max_cycles).powf(k as f64 / (half.max(2) - 1) as f64);
        let phase = std::f64::consts::TAU * cycles * u;
        let v = if c % 2 == 0 { phase.sin() } else { phase.cos() };
        v * std * std::f64::consts::SQRT_2
    })
}

fn make_linear(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    inputs: usize,
    outputs: usize,
    std: f64,
) -> Result<Linear, ModelError> {
    Ok(Linear {
        w: store.insert(&format!("{name}.w"), truncated_normal(inputs, outputs, std, rng))?,
        b: store.insert(&format!("{name}.b"), Array2::zeros((1, outputs)))?,
    })
}

fn make_norm(store: &mut ParameterStore, name: &str, d: usize) -> Result<Norm, ModelError> {
    Ok(Norm {
        gain: store.insert(&format!("{name}.gain"), Array2::ones((1, d)))?,
        bias: store.insert(&format!("{name}.bias"), Array2::zeros((1, d)))?,
    })
}

impl LaneTransformer {
    /// Fresh model with truncated-normal weights, zero biases and unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = config.embed_dim;
        let std = config.init_std;

        let linear = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            make_linear(store, rng, name, i, o, std)
        };
        let norm = |store: &mut ParameterStore, name: &str| make_norm(store, name, d);
        let attention = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str| {
            Ok::<_, ModelError>(Attention {
                q: make_linear(store, rng, &format!("{name}.q"), d, d, std)?,
                k: make_linear(store, rng, &format!("{name}.k"), d, d, std)?,
                v: make_linear(store, rng, &format!("{name}.v"), d, d, std)?,
                o: make_linear(store, rng, &format!("{name}.o"), d, d, std)?,
            })
        };

        let patch = linear(&mut store, &mut rng, "enc.patch", config.patch_dim(), d)?;
        let enc_pos = store.insert("enc.pos", truncated_normal(config.n_patches(), d, std, &mut rng))?;
        let mut enc_blocks = Vec::new();
        for i in 0..config.encoder_layers {
            let p = format!("enc.block{i}");
            enc_blocks.push(EncoderBlock {
                ln1: norm(&mut store, &format!("{p}.ln1"))?,
                attn: attention(&mut store, &mut rng, &format!("{p}.attn"))?,
                ln2: norm(&mut store, &format!("{p}.ln2"))?,
                ff: FeedForward {
                    up: linear(&mut store, &mut rng, &format!("{p}.ff.up"), d, config.ff_dim)?,
                    down: linear(&mut store, &mut rng, &format!("{p}.ff.down"), config.ff_dim, d)?,
                },
            });
        }
        let bridge_norm = norm(&mut store, "bridge.ln")?;
        let bridge = linear(&mut store, &mut rng, "bridge", d, d)?;

        let rows = config.vocab_rows();
        let mut tok = truncated_normal(rows, d, std, &mut rng);
        if config.coord_init == CoordInit::Sinusoidal {
            let n = config.n_bins as usize;
            tok.slice_mut(s![1..=n, ..]).assign(&sinusoidal_coords(n, d, std));
        }
        let tok = store.insert("dec.tok", tok)?;
        let dec_pos = store.insert("dec.pos", truncated_normal(config.max_seq_len, d, std, &mut rng))?;
        let mut dec_blocks = Vec::new();
        for i in 0..config.decoder_layers {
            let p = format!("dec.block{i}");
            dec_blocks.push(DecoderBlock {
                ln1: norm(&mut store, &format!("{p}.ln1"))?,
                self_attn: attention(&mut store, &mut rng, &format!("{p}.self"))?,
                ln2: norm(&mut store, &format!("{p}.ln2"))?,
                cross_attn: attention(&mut store, &mut rng, &format!("{p}.cross"))?,
                ln3: norm(&mut store, &format!("{p}.ln3"))?,
                ff: FeedForward {
                    up: linear(&mut store, &mut rng, &format!("{p}.ff.up"), d, config.ff_dim)?,
                    down: linear(&mut store, &mut rng, &format!("{p}.ff.down"), config.ff_dim, d)?,
                },
            });
        }
        let final_norm = norm(&mut store, "dec.ln_f")?;
        let head_bias = store.insert("dec.head.b", Array2::zeros((1, rows)))?;

        let layout = Layout {
            patch,
            enc_pos,
            enc_blocks,
            bridge_norm,
            bridge,
            tok,
            dec_pos,
            dec_blocks,
            final_norm,
            head_bias,
        };
        Ok(Self { config, store, layout })
    }

    /// Rebuilds a model from a store with the expected names and shapes.
    pub fn from_store(config: ModelConfig, store: ParameterStore) -> Result<Self, ModelError> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.store.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for ((_, want), (_, got)) in fresh.store.iter().zip(store.iter()) {
            if want.name != got.name || want.value.dim() != got.value.dim() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.dim(),
                    want.name,
                    want.value.dim()
                )));
            }
        }
        fresh.store = store;
        fresh.store.zero_grad();
        Ok(fresh)
    }

    pub fn vocab(&self) -> Vocabulary {
        self.config.vocab()
    }

    // ---- graph construction ----

    fn linear(&self, g: &mut Graph, x: NodeId, l: Linear) -> Result<NodeId, ModelError> {
        let w = g.param(&self.store, l.w);
        let b = g.param(&self.store, l.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, n: Norm) -> Result<NodeId, ModelError> {
        let gain = g.param(&self.store, n.gain);
        let bias = g.param(&self.store, n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn attention(&self, g: &mut Graph, xq: NodeId, xkv: NodeId, a: Attention, causal: bool) -> Result<NodeId, ModelError> {
        let q = self.linear(g, xq, a.q)?;
        let k = self.linear(g, xkv, a.k)?;
        let v = self.linear(g, xkv, a.v)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let sc = g.matmul_nt(qh, kh)?;
            let sc = g.scale(sc, scale);
            let p = g.softmax(sc, causal);
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.linear(g, cat, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: NodeId, f: FeedForward) -> Result<NodeId, ModelError> {
        let h = self.linear(g, x, f.up)?;
        let h = g.gelu(h);
        self.linear(g, h, f.down)
    }

    fn patchify(&self, image: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let c = &self.config;
        let (h, w) = (c.image_height as usize, c.image_width as usize);
        if image.dim() != (h, w) {
            return Err(ModelError::DimMismatch { expected: (w, h), got: (image.ncols(), image.nrows()) });
        }
        let p = c.patch_size as usize;
        let cols = w / p;
        Ok(Array2::from_shape_fn((c.n_patches(), p * p), |(i, j)| {
            let (py, px) = (i / cols, i % cols);
            image[[py * p + j / p, px * p + j % p]]
        }))
    }

    /// Encoder forward inside `g`; returns the `n_patches x d` grid node.
    pub fn encode_graph(&self, g: &mut Graph, image: &Array2<f64>) -> Result<NodeId, ModelError> {
        let patches = g.input(self.patchify(image)?);
        let x = self.linear(g, patches, self.layout.patch)?;
        let pos = g.param(&self.store, self.layout.enc_pos);
        let mut x = g.add(x, pos)?;
        for b in &self.layout.enc_blocks {
            let h = self.norm(g, x, b.ln1)?;
            let h = self.attention(g, h, h, b.attn, false)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, b.ln2)?;
            let h = self.feed_forward(g, h, b.ff)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Decoder-side view of the encoder grid (norm + linear bridge).
    pub fn memory_graph(&self, g: &mut Graph, enc: NodeId) -> Result<NodeId, ModelError> {
        let h = self.norm(g, enc, self.layout.bridge_norm)?;
        self.linear(g, h, self.layout.bridge)
    }

    /// Next-token logits for every prefix of `input` (`len x vocab_rows`).
    pub fn decode_graph(&self, g: &mut Graph, memory: NodeId, input: &[Token]) -> Result<NodeId, ModelError> {
        if input.is_empty() || input.len() > self.config.max_seq_len {
            return Err(ModelError::PrefixTooLong { len: input.len(), max: self.config.max_seq_len });
        }
        let ids: Vec<usize> = input.iter().map(|t| t.id()).collect();
        let tok = g.param(&self.store, self.layout.tok);
        let e = g.gather_rows(tok, &ids)?;
        let pos_table = g.param(&self.store, self.layout.dec_pos);
        let positions: Vec<usize> = (0..input.len()).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(e, pos)?;
        for b in &self.layout.dec_blocks {
            let h = self.norm(g, x, b.ln1)?;
            let h = self.attention(g, h, h, b.self_attn, true)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, b.ln2)?;
            let h = self.attention(g, h, memory, b.cross_attn, false)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, b.ln3)?;
            let h = self.feed_forward(g, h, b.ff)?;
            x = g.add(x, h)?;
        }
        let h = self.norm(g, x, self.layout.final_norm)?;
        let logits = g.matmul_nt(h, tok)?;
        let hb = g.param(&self.store, self.layout.head_bias);
        g.add_row(logits, hb)
    }

    /// Weighted next-token cross-entropy averaged over weight-1 positions.
    pub fn sequence_loss_graph(
        &self,
        g: &mut Graph,
        memory: NodeId,
        input: &[Token],
        target: &[Token],
    ) -> Result<NodeId, ModelError> {
        if input.len() != target.len() {
            return Err(ModelError::Shape(format!("input length {} != target length {}", input.len(), target.len())));
        }
        let logits = self.decode_graph(g, memory, input)?;
        let mut w = target_weights(&self.vocab(), target);
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
        let ids: Vec<usize> = target.iter().map(|t| t.id()).collect();
        g.cross_entropy(logits, &ids, &w)
    }

    /// `scale * -log Q(tokens[PROMPT_LEN..] | prompt)`; with `scale = lambda * r`
    /// its gradient is the REINFORCE direction for descent.
    pub fn scaled_nll_graph(&self, g: &mut Graph, memory: NodeId, tokens: &[Token], scale: f64) -> Result<NodeId, ModelError> {
        if tokens.len() <= PROMPT_LEN {
            let z = g.input(Array2::zeros((1, 1)));
            return Ok(z);
        }
        let (input, target) = (&tokens[..tokens.len() - 1], &tokens[1..]);
        let logits = self.decode_graph(g, memory, input)?;
        let coeffs: Vec<f64> = (0..target.len()).map(|j| if j + 1 < PROMPT_LEN { 0.0 } else { scale }).collect();
        let ids: Vec<usize> = target.iter().map(|t| t.id()).collect();
        g.cross_entropy(logits, &ids, &coeffs)
    }

    /// Teacher-forced loss and parameter gradients for one image and a set
    /// of target sequences (losses are summed across sequences).
    pub fn loss_and_grads(&self, image: &Array2<f64>, seqs: &[&TokenSequence]) -> Result<(Vec<f64>, Gradients), ModelError> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, image)?;
        let mem = self.memory_graph(&mut g, enc)?;
        let mut losses = Vec::with_capacity(seqs.len());
        let mut total: Option<NodeId> = None;
        for s in seqs {
            let (input, target) = s.teacher_forcing_pair();
            let l = self.sequence_loss_graph(&mut g, mem, input, target)?;
            losses.push(g.scalar(l));
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let Some(total) = total else { return Ok((losses, Gradients::default())) };
        if !g.scalar(total).is_finite() {
            return Err(ModelError::NonFinite("loss".into()));
        }
        Ok((losses, g.backward(total)?))
    }

    /// Gradient of `sum_i scales[i] * -log Q(seq_i)` for sampled sequences of one image.
    pub fn policy_grads(&self, image: &Array2<f64>, seqs: &[(&[Token], f64)]) -> Result<Gradients, ModelError> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, image)?;
        let mem = self.memory_graph(&mut g, enc)?;
        let mut total: Option<NodeId> = None;
        for (tokens, scale) in seqs {
            if *scale == 0.0 {
                continue;
            }
            let l = self.scaled_nll_graph(&mut g, mem, tokens, *scale)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        match total {
            Some(t) => g.backward(t),
            None => Ok(Gradients::default()),
        }
    }

    // ---- inference ----

    pub fn encode(&self, image: &Array2<f64>) -> Result<EncoderOutput, ModelError> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, image)?;
        Ok(EncoderOutput { grid: g.value(enc).clone() })
    }

    pub fn encode_image(&self, img: &GrayImage) -> Result<EncoderOutput, ModelError> {
        let (w, h) = (self.config.image_width, self.config.image_height);
        if (img.width, img.height) != (w, h) {
            return Err(ModelError::DimMismatch {
                expected: (w as usize, h as usize),
                got: (img.width as usize, img.height as usize),
            });
        }
        self.encode(&image_to_input(img))
    }

    /// Full-prefix logits (`len x vocab_rows`), computed without caching.
    pub fn decode_logits(&self, enc: &EncoderOutput, prefix: &[Token]) -> Result<Array2<f64>, ModelError> {
        let mut g = Graph::new();
        let e = g.input(enc.grid.clone());
        let mem = self.memory_graph(&mut g, e)?;
        let l = self.decode_graph(&mut g, mem, prefix)?;
        Ok(g.value(l).clone())
    }

    /// Teacher-forced log-probabilities of `tokens[PROMPT_LEN..]`.
    pub fn sequence_log_probs(&self, enc: &EncoderOutput, tokens: &[Token]) -> Result<Vec<f64>, ModelError> {
        if tokens.len() <= PROMPT_LEN {
            return Ok(Vec::new());
        }
        let logits = self.decode_logits(enc, &tokens[..tokens.len() - 1])?;
        let ids: Vec<usize> = tokens[1..].iter().map(|t| t.id()).collect();
        Ok(log_softmax_pick(&logits.view(), &ids)[PROMPT_LEN - 1..].to_vec())
    }

    pub fn start_decoding(&self, enc: &EncoderOutput) -> Result<DecodeState<'_>, ModelError> {
        DecodeState::new(self, enc)
    }

    fn generate(
        &self,
        enc: &EncoderOutput,
        fmt: SequenceFormat,
        max_len: Option<usize>,
        mut choose: impl FnMut(&Array1<f64>) -> usize,
    ) -> Result<SampledSequence, ModelError> {
        let v = self.vocab();
        let limit = max_len.unwrap_or(usize::MAX).min(self.config.max_seq_len + 1);
        let mut tokens = vec![v.start(), v.format_token(fmt)];
        let mut per_step = Vec::new();
        let mut state = self.start_decoding(enc)?;
        state.step(tokens[0])?;
        let mut logits = state.step(tokens[1])?;
        while tokens.len() < limit {
            let pick = choose(&logits);
            per_step.push(log_softmax_pick(&logits.view().insert_axis(Axis(0)), &[pick])[0]);
            let t = Token(pick as u32);
            tokens.push(t);
            if t == v.end() || tokens.len() >= limit {
                break;
            }
            logits = state.step(t)?;
        }
        Ok(SampledSequence {
            tokens: TokenSequence { format: fmt, tokens },
            log_prob: per_step.iter().sum(),
            per_step_log_probs: per_step,
        })
    }

    /// Samples from `softmax(logits / temperature)` until END or the length
    /// limit. Log-probabilities are always under the temperature-1 model.
    pub fn sample_sequence(
        &self,
        enc: &EncoderOutput,
        fmt: SequenceFormat,
        temperature: f64,
        max_len: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<SampledSequence, ModelError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ModelError::Config(format!("temperature must be positive, got {temperature}")));
        }
        self.generate(enc, fmt, max_len, |logits| sample_index(&logits.view(), temperature, rng))
    }

    pub fn greedy_decode(&self, enc: &EncoderOutput, fmt: SequenceFormat) -> Result<TokenSequence, ModelError> {
        Ok(self.generate(enc, fmt, None, |logits| argmax(&logits.view()))?.tokens)
    }
}

/// First index of the maximum.
pub fn argmax(x: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn sample_index(logits: &ArrayView1<f64>, temperature: f64, rng: &mut impl Rng) -> usize {
    let m = logits.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    // rounding fallback: last index with positive weight
    w.iter().rposition(|x| *x > 0.0).unwrap_or(0)
}

struct LayerCache {
    k: Array2<f64>,
    v: Array2<f64>,
    cross_k: Array2<f64>,
    cross_v: Array2<f64>,
}

/// Incremental decoder with per-layer key/value caches.
pub struct DecodeState<'m> {
    model: &'m LaneTransformer,
    layers: Vec<LayerCache>,
    len: usize,
}

fn row_linear(x: &ArrayView1<f64>, store: &ParameterStore, l: Linear) -> Array1<f64> {
    x.dot(store.value(l.w)) + &store.value(l.b).row(0)
}

fn row_norm(x: &Array1<f64>, store: &ParameterStore, n: Norm) -> Array1<f64> {
    let xv = x.view().insert_axis(Axis(0));
    let (y, _, _) = layer_norm_rows(&xv, &store.value(n.gain).view(), &store.value(n.bias).view());
    y.row(0).to_owned()
}

fn mat_linear(x: &Array2<f64>, store: &ParameterStore, l: Linear) -> Array2<f64> {
    x.dot(store.value(l.w)) + store.value(l.b)
}

impl<'m> DecodeState<'m> {
    fn new(model: &'m LaneTransformer, enc: &EncoderOutput) -> Result<Self, ModelError> {
        let c = &model.config;
        if enc.grid.dim() != (c.n_patches(), c.embed_dim) {
            return Err(ModelError::Shape(format!(
                "encoder grid {:?}, expected {:?}",
                enc.grid.dim(),
                (c.n_patches(), c.embed_dim)
            )));
        }
        let st = &model.store;
        let (normed, _, _) = layer_norm_rows(
            &enc.grid.view(),
            &st.value(model.layout.bridge_norm.gain).view(),
            &st.value(model.layout.bridge_norm.bias).view(),
        );
        let memory = mat_linear(&normed, st, model.layout.bridge);
        let layers = model
            .layout
            .dec_blocks
            .iter()
            .map(|b| LayerCache {
                k: Array2::zeros((c.max_seq_len, c.embed_dim)),
                v: Array2::zeros((c.max_seq_len, c.embed_dim)),
                cross_k: mat_linear(&memory, st, b.cross_attn.k),
                cross_v: mat_linear(&memory, st, b.cross_attn.v),
            })
            .collect();
        Ok(Self { model, layers, len: 0 })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token; returns next-token logits.
    pub fn step(&mut self, token: Token) -> Result<Array1<f64>, ModelError> {
        let m = self.model;
        let c = &m.config;
        let st = &m.store;
        if self.len >= c.max_seq_len {
            return Err(ModelError::PrefixTooLong { len: self.len + 1, max: c.max_seq_len });
        }
        let tok = st.value(m.layout.tok);
        if token.id() >= tok.nrows() {
            return Err(ModelError::Shape(format!("token {} outside vocabulary", token.0)));
        }
        let pos = self.len;
        let mut x = &tok.row(token.id()) + &st.value(m.layout.dec_pos).row(pos);
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let attend = |q: &Array1<f64>, k: &ndarray::ArrayView2<f64>, v: &ndarray::ArrayView2<f64>| {
            let mut out = Array1::zeros(c.embed_dim);
            for h in 0..c.heads {
                let r = h * dh..(h + 1) * dh;
                let qh = q.slice(s![r.clone()]);
                let kh = k.slice(s![.., r.clone()]);
                let vh = v.slice(s![.., r.clone()]);
                let scores = (kh.dot(&qh) * scale).insert_axis(Axis(0));
                let p = softmax_rows(&scores.view(), None);
                out.slice_mut(s![r]).assign(&p.row(0).dot(&vh));
            }
            out
        };

        for (b, cache) in m.layout.dec_blocks.iter().zip(self.layers.iter_mut()) {
            let h = row_norm(&x, st, b.ln1);
            let q = row_linear(&h.view(), st, b.self_attn.q);
            cache.k.row_mut(pos).assign(&row_linear(&h.view(), st, b.self_attn.k));
            cache.v.row_mut(pos).assign(&row_linear(&h.view(), st, b.self_attn.v));
            let a = attend(&q, &cache.k.slice(s![..=pos, ..]), &cache.v.slice(s![..=pos, ..]));
            x += &row_linear(&a.view(), st, b.self_attn.o);

            let h = row_norm(&x, st, b.ln2);
            let q = row_linear(&h.view(), st, b.cross_attn.q);
            let a = attend(&q, &cache.cross_k.view(), &cache.cross_v.view());
            x += &row_linear(&a.view(), st, b.cross_attn.o);

            let h = row_norm(&x, st, b.ln3);
            let u = row_linear(&h.view(), st, b.ff.up).mapv(gelu);
            x += &row_linear(&u.view(), st, b.ff.down);
        }
        self.len += 1;
        let h = row_norm(&x, st, m.layout.final_norm);
        Ok(tok.dot(&h) + &st.value(m.layout.head_bias).row(0))
    }
}
