use std::path::Path;
use std::process::{Command, Output};

use laneseq_cli::commands::{self, FormatReport};
use laneseq_cli::RunConfig;
use laneseq_core::codec::SequenceFormat;
use laneseq_core::synthdata::{generate_scene, load_dataset, write_records, GrayImage, SceneSpec};
use laneseq_model::{checkpoint, LaneTransformer};
use laneseq_train::optim::AdamW;
use laneseq_train::{prepare_dataset, pretrain_epoch, TrainConfig};

const TINY: &str = r#"
seed = 3
holdout = 2

[scene]
width = 48
height = 16
lane_count = [1, 2]

[model]
image_width = 48
image_height = 16
patch_size = 8
embed_dim = 16
encoder_layers = 1
decoder_layers = 1
heads = 2
ff_dim = 32
n_bins = 48
max_seq_len = 118

[train]
batch_size = 2
max_lanes = 2
pretrain_epochs = 1
mfrl_epochs = 1
learning_rate = 0.003
"#;

fn laneseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laneseq")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn tiny_run_config() -> RunConfig {
    toml::from_str(TINY).unwrap()
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = laneseq(&["gen-data", "--out", path(&out), "--n", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(load_dataset(&out).unwrap().is_empty());
    assert!(out.join(laneseq_cli::config::RESOLVED_CONFIG_FILE).exists());
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(laneseq(&["gen-data", "--out", path(d), "--n", "5", "--seed", "11", "--config", path(&cfg)]).status.success());
    }
    let names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn stage_two_without_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("d");
    assert!(laneseq(&["gen-data", "--out", path(&data), "--n", "6", "--config", path(&cfg)]).status.success());
    let o = laneseq(&["train", "--data", path(&data), "--out", path(&dir.path().join("r")), "--stage", "mfrl", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("stage-1 checkpoint") && msg.contains("pretraining"), "{msg}");
}

#[test]
fn train_eval_infer_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("d");
    let run = dir.path().join("r");
    assert!(laneseq(&["gen-data", "--out", path(&data), "--n", "8", "--config", path(&cfg)]).status.success());
    let o = laneseq(&["train", "--data", path(&data), "--out", path(&run), "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "pretrain.ckpt", "metrics.csv", "resolved_config.toml", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,stage,format,loss,reward,precision,recall,f1");
    // pretrain epoch 1, stage-2 epochs 0 and 1; seg, anchor, param and combined each
    assert_eq!(lines.count(), 12);
    let resolved: RunConfig = toml::from_str(&std::fs::read_to_string(run.join("resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(resolved, tiny_run_config());

    let ckpt = run.join("best.ckpt");
    let ev = dir.path().join("ev");
    let o = laneseq(&["eval", "--data", path(&data), "--ckpt", path(&ckpt), "--tusimple", "--out", path(&ev), "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Vec<FormatReport> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r.report.accuracy.is_some()));
    let on_disk: Vec<FormatReport> = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(on_disk, reports);
    assert_eq!(std::fs::read_to_string(ev.join("eval.csv")).unwrap().lines().count(), 4);

    let blank = dir.path().join("blank.pgm");
    std::fs::write(&blank, GrayImage::new(48, 16).to_pgm()).unwrap();
    let ppm = dir.path().join("o.ppm");
    let o = laneseq(&["infer", "--image", path(&blank), "--ckpt", path(&ckpt), "--format", "all", "--render", path(&ppm)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6\n48 16\n255\n"));

    let wrong = dir.path().join("wrong.pgm");
    std::fs::write(&wrong, GrayImage::new(40, 16).to_pgm()).unwrap();
    let o = laneseq(&["infer", "--image", path(&wrong), "--ckpt", path(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("40x16") && msg.contains("48x16"), "{msg}");
}

#[test]
fn ground_truth_as_predictions_scores_perfectly() {
    let spec = SceneSpec::default();
    let scenes: Vec<_> = (0..30).map(|i| generate_scene(&spec, i)).collect();
    for fmt in SequenceFormat::ALL {
        let preds: Vec<_> = scenes.iter().map(|s| s.lanes_for(fmt)).collect();
        let r = commands::score_format(fmt, &scenes, &preds, &RunConfig::default(), 0.5, true);
        assert_eq!(r.report.f1, 1.0, "{fmt}");
        assert_eq!(r.report.fp + r.report.fn_, 0);
        assert!(r.report.accuracy.unwrap() > 0.99);
    }
}

/// A model overfit to one scene reproduces that scene's lanes at inference.
#[test]
fn overfit_model_reproduces_its_training_scene() {
    let rc = tiny_run_config();
    let spec = SceneSpec { seed: 5, ..rc.scene.clone() };
    let recs = vec![generate_scene(&spec, 0)];
    let mut m = LaneTransformer::new(rc.model.clone(), 2).unwrap();
    let ex = prepare_dataset(&recs, m.vocab(), 2).unwrap();
    let cfg = TrainConfig { learning_rate: 5e-3, batch_size: 1, max_lanes: 2, ..TrainConfig::default() };
    let mut opt = AdamW::new(&m.store, cfg.learning_rate, cfg.weight_decay);
    for step in 0..300 {
        pretrain_epoch(&ex, &mut m, &mut opt, &cfg, step).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&ckpt, &m, serde_json::Value::Null).unwrap();
    write_records(&recs, &dir.path().join("d")).unwrap();
    let image = dir.path().join("d").join(laneseq_core::synthdata::image_file_name(0));
    let outs = commands::infer(&image, &ckpt, &SequenceFormat::ALL, None).unwrap();
    let n = f64::from(rc.model.n_bins);
    let (bx, by) = (48.0 / n, 16.0 / n);
    for out in outs {
        let gt = recs[0].lanes_for(out.format);
        assert_eq!(out.lanes.len(), gt.len(), "{}", out.format);
        let mut gt_sorted = gt.clone();
        gt_sorted.sort_by(|a, b| {
            let d = recs[0].dims();
            laneseq_core::codec::bottom_x(a, d).total_cmp(&laneseq_core::codec::bottom_x(b, d))
        });
        for (p, g) in out.lanes.iter().zip(&gt_sorted) {
            use laneseq_core::geometry::Lane::*;
            let pts = |l: &laneseq_core::geometry::Lane| match l {
                Polyline(l) => l.points.clone(),
                Polygon(l) => l.vertices.clone(),
                Poly(_) => Vec::new(),
            };
            for (a, b) in pts(p).iter().zip(pts(g)) {
                assert!((a.x - b.x).abs() <= bx && (a.y - b.y).abs() <= by, "{}: {a:?} vs {b:?}", out.format);
            }
            if let (Poly(a), Poly(b)) = (p, g) {
                assert!((a.offset - b.offset).abs() <= by);
                for (x, y) in a.coeffs.iter().zip(b.coeffs) {
                    let q = 1.0 / (1.0 + (-y).exp());
                    assert!((x - y).abs() <= 1.01 / (n * q * (1.0 - q)), "{x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn verify_reports_and_exit_codes() {
    let o = laneseq(&["verify", "--suite", "codec"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 6);
    assert!(text.contains("measured=") && text.contains("bound="));

    let o = laneseq(&["verify", "--suite", "gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL gradcheck"));

    let o = laneseq(&["verify", "--suite", "reinforce", "--json"]);
    let report: laneseq_cli::verify::VerifyReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report.passed() && !report.checks.is_empty());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(laneseq(&["verify", "--suite", "nope"]).status.code(), Some(1));
    assert_eq!(laneseq(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(laneseq(&["--help"]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_laneseq"))
        .args(["verify", "--suite", "codec"])
        .env("LANE2SEQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = laneseq(&["gen-data", "--out", path(dir.path()), "--n", "1", "--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
}
