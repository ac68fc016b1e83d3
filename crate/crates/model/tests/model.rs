use laneseq_core::codec::{SequenceFormat, Token};
use laneseq_model::autodiff::Fault;
use laneseq_model::checkpoint;
use laneseq_model::gradcheck::{run_toy_gradcheck, MAX_RELATIVE_ERROR};
use laneseq_model::{LaneTransformer, ModelConfig};
use ndarray::Array2;

#[test]
fn toy_gradients_match_finite_differences() {
    let report = run_toy_gradcheck(7, Fault::None).unwrap();
    for t in &report.tensors {
        assert!(t.max_relative_error < MAX_RELATIVE_ERROR, "{}: {}", t.name, t.max_relative_error);
    }
    assert!(report.passed);
    assert!(report.tensors.iter().any(|t| t.name == "dec.tok"));
}

#[test]
fn sign_flipped_backward_rule_is_caught() {
    let report = run_toy_gradcheck(7, Fault::NegateGeluBackward).unwrap();
    assert!(!report.passed);
    let worst = report.tensors.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).unwrap();
    assert!(worst.max_relative_error > 0.1);
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 32,
        patch_size: 8,
        embed_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 12,
        n_bins: 10,
        max_seq_len: 12,
        ..ModelConfig::default()
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let m = LaneTransformer::new(small_config(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &m, serde_json::json!({"epoch": 2})).unwrap();
    let (back, extra) = checkpoint::load(&path).unwrap();
    assert_eq!(extra["epoch"], 2);
    assert_eq!(back.config, m.config);
    let img = Array2::from_shape_fn((16, 32), |(y, x)| ((x * 7 + y * 3) % 11) as f64 / 5.0 - 1.0);
    let v = m.vocab();
    let prefix = [v.start(), v.fmt_anchor(), Token(4), Token(9)];
    let (e1, e2) = (m.encode(&img).unwrap(), back.encode(&img).unwrap());
    assert_eq!(e1, e2);
    let (l1, l2) = (m.decode_logits(&e1, &prefix).unwrap(), back.decode_logits(&e2, &prefix).unwrap());
    assert!(l1.iter().zip(l2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = LaneTransformer::new(small_config(), 3).unwrap();
    let bytes = checkpoint::to_bytes(&m, serde_json::Value::Null);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    let mut other = bytes;
    other[8] = 9;
    assert!(checkpoint::from_bytes(&other).is_err());
}

/// Encoder with zero patch weights and residual branches switched off
/// passes the positional embedding straight through.
#[test]
fn zero_image_encoder_returns_positional_embedding() {
    let cfg = ModelConfig { encoder_layers: 1, ..small_config() };
    let mut m = LaneTransformer::new(cfg, 4).unwrap();
    for name in ["enc.patch.w", "enc.block0.attn.o.w", "enc.block0.ff.down.w"] {
        let id = m.store.id(name).unwrap();
        m.store.get_mut(id).value.fill(0.0);
    }
    let out = m.encode(&Array2::zeros((16, 32))).unwrap();
    assert_eq!(out.grid, m.store.by_name("enc.pos").unwrap().value);
}

// ---- scalar-loop oracle of the decoder ----

type M = Vec<Vec<f64>>;

fn get(m: &LaneTransformer, name: &str) -> M {
    let a = &m.store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).value;
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn lin(x: &M, m: &LaneTransformer, name: &str) -> M {
    let b = get(m, &format!("{name}.b"));
    mm(x, &get(m, &format!("{name}.w"))).into_iter().map(|r| r.iter().zip(&b[0]).map(|(a, c)| a + c).collect()).collect()
}

fn ln(x: &M, m: &LaneTransformer, name: &str) -> M {
    let g = get(m, &format!("{name}.gain"));
    let b = get(m, &format!("{name}.bias"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[0][i] + b[0][i]).collect()
        })
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn attn(xq: &M, xkv: &M, m: &LaneTransformer, name: &str, heads: usize, causal: bool) -> M {
    let q = lin(xq, m, &format!("{name}.q"));
    let k = lin(xkv, m, &format!("{name}.k"));
    let v = lin(xkv, m, &format!("{name}.v"));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let n = if causal { i + 1 } else { k.len() };
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i][h * dh + c] = (0..n).map(|j| e[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    lin(&out, m, &format!("{name}.o"))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn oracle_logits(m: &LaneTransformer, grid: &M, tokens: &[Token]) -> M {
    let heads = m.config.heads;
    let mem = lin(&ln(grid, m, "bridge.ln"), m, "bridge");
    let tok = get(m, "dec.tok");
    let pos = get(m, "dec.pos");
    let mut x: M = tokens.iter().enumerate().map(|(i, t)| tok[t.id()].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    for l in 0..m.config.decoder_layers {
        let p = format!("dec.block{l}");
        x = add(&x, &attn(&ln(&x, m, &format!("{p}.ln1")), &ln(&x, m, &format!("{p}.ln1")), m, &format!("{p}.self"), heads, true));
        x = add(&x, &attn(&ln(&x, m, &format!("{p}.ln2")), &mem, m, &format!("{p}.cross"), heads, false));
        let up: M = lin(&ln(&x, m, &format!("{p}.ln3")), m, &format!("{p}.ff.up")).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        x = add(&x, &lin(&up, m, &format!("{p}.ff.down")));
    }
    let h = ln(&x, m, "dec.ln_f");
    let hb = get(m, "dec.head.b");
    h.iter()
        .map(|r| tok.iter().enumerate().map(|(v, e)| r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + hb[0][v]).collect())
        .collect()
}

#[test]
fn decoder_matches_scalar_oracle() {
    // one layer, one head, two tokens
    let cfg = ModelConfig { heads: 1, ..small_config() };
    let m = LaneTransformer::new(cfg, 5).unwrap();
    let img = Array2::from_shape_fn((16, 32), |(y, x)| ((x + 2 * y) % 5) as f64 / 2.0 - 1.0);
    let enc = m.encode(&img).unwrap();
    let grid: M = enc.grid.rows().into_iter().map(|r| r.to_vec()).collect();
    let v = m.vocab();
    for tokens in [vec![v.start(), v.fmt_param()], vec![v.start(), v.fmt_seg(), Token(1), Token(1), Token(7)]] {
        let got = m.decode_logits(&enc, &tokens).unwrap();
        let want = oracle_logits(&m, &grid, &tokens);
        for (r, w) in got.rows().into_iter().zip(&want) {
            for (a, b) in r.iter().zip(w) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }
    // multi-head as well
    let m2 = LaneTransformer::new(small_config(), 6).unwrap();
    let enc2 = m2.encode(&img).unwrap();
    let grid2: M = enc2.grid.rows().into_iter().map(|r| r.to_vec()).collect();
    let toks = [v.start(), v.fmt_anchor(), Token(3), Token(3), v.lane()];
    let got = m2.decode_logits(&enc2, &toks).unwrap();
    let want = oracle_logits(&m2, &grid2, &toks);
    for (r, w) in got.rows().into_iter().zip(&want) {
        for (a, b) in r.iter().zip(w) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn prefix_too_long_is_an_error() {
    let m = LaneTransformer::new(small_config(), 1).unwrap();
    let enc = m.encode(&Array2::zeros((16, 32))).unwrap();
    let long = vec![Token(1); 13];
    assert!(m.decode_logits(&enc, &long).is_err());
    let seq = m.greedy_decode(&enc, SequenceFormat::Anchor).unwrap();
    assert!(seq.len() <= m.config.max_seq_len + 1);
}
