//! Subcommand implementations, callable without going through argv.

use std::path::{Path, PathBuf};

use laneseq_core::codec::{DecodedScene, SceneCodec, SequenceFormat};
use laneseq_core::geometry::{ImageDims, Lane};
use laneseq_core::metrics::{match_lanes, tusimple_points, Counts, EvalReport, MatchParams, PointCounts};
use laneseq_core::rewards::reward_lanes;
use laneseq_core::synthdata::{load_dataset, write_dataset, GrayImage, SceneRecord};
use laneseq_model::checkpoint;
use laneseq_model::transformer::image_to_input;
use laneseq_model::LaneTransformer;
use laneseq_train::run::{run_training, RunSpec, BEST_CHECKPOINT, PRETRAIN_CHECKPOINT};
use laneseq_train::{EvalSummary, Stage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::overlay;

pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    Pretrain,
    Mfrl,
    Both,
}

impl StageArg {
    pub fn stages(self) -> &'static [Stage] {
        match self {
            StageArg::Pretrain => &[Stage::Pretrain],
            StageArg::Mfrl => &[Stage::Mfrl],
            StageArg::Both => &[Stage::Pretrain, Stage::Mfrl],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FormatArg {
    Seg,
    Anchor,
    Param,
    All,
}

impl FormatArg {
    pub fn formats(self) -> Vec<SequenceFormat> {
        match self {
            FormatArg::Seg => vec![SequenceFormat::Segmentation],
            FormatArg::Anchor => vec![SequenceFormat::Anchor],
            FormatArg::Param => vec![SequenceFormat::Parameter],
            FormatArg::All => SequenceFormat::ALL.to_vec(),
        }
    }
}

/// Generates `n` scenes from `cfg.scene` (seed taken from `cfg.seed`).
pub fn gen_data(out: &Path, n: u64, cfg: &RunConfig) -> Result<(), CliError> {
    let spec = laneseq_core::synthdata::SceneSpec { seed: cfg.seed, ..cfg.scene.clone() };
    write_dataset(&spec, n, out)?;
    RunConfig { scene: spec, ..cfg.clone() }.write_resolved(out)
}

/// The last `holdout` scenes are validation, the rest training.
pub fn split(records: &[SceneRecord], holdout: usize) -> Result<(&[SceneRecord], &[SceneRecord]), CliError> {
    if holdout == 0 || holdout >= records.len() {
        return Err(CliError::Usage(format!(
            "holdout of {holdout} scenes needs a dataset larger than that (have {})",
            records.len()
        )));
    }
    Ok(records.split_at(records.len() - holdout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stages: Vec<Stage>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub stage1_eval: Option<EvalSummary>,
    pub final_eval: EvalSummary,
    pub best_eval: EvalSummary,
    pub best_checkpoint: PathBuf,
}

fn checkpoint_config_matches(model: &LaneTransformer, cfg: &RunConfig) -> Result<(), CliError> {
    let (a, b) = (&model.config, &cfg.model);
    if a.image_height != b.image_height || a.image_width != b.image_width || a.n_bins != b.n_bins {
        return Err(CliError::Usage(format!(
            "checkpoint is {}x{} with {} bins, config says {}x{} with {} bins",
            a.image_height, a.image_width, a.n_bins, b.image_height, b.image_width, b.n_bins
        )));
    }
    Ok(())
}

/// Runs the requested stages. Stage 2 alone starts from `ckpt`, or from the
/// stage-1 checkpoint already in `out` if there is one.
pub fn train(data: &Path, out: &Path, cfg: &RunConfig, stage: StageArg, ckpt: Option<&Path>) -> Result<TrainSummary, CliError> {
    let stages = stage.stages();
    let ckpt = match ckpt {
        Some(p) => Some(p.to_path_buf()),
        None if stage == StageArg::Mfrl => Some(out.join(PRETRAIN_CHECKPOINT)).filter(|p| p.exists()),
        None => None,
    };
    let init = match &ckpt {
        Some(p) => {
            let (m, _) = checkpoint::load(p)?;
            checkpoint_config_matches(&m, cfg)?;
            Some(m)
        }
        None if stage == StageArg::Mfrl => return Err(laneseq_train::TrainError::MissingPretrained.into()),
        None => None,
    };
    let records = load_dataset(data)?;
    let (train, val) = split(&records, cfg.holdout)?;
    cfg.write_resolved(out)?;
    let outcome = run_training(
        &cfg.train,
        RunSpec {
            model_config: init.as_ref().map_or_else(|| cfg.model.clone(), |m| m.config.clone()),
            train,
            val,
            stages,
            init,
            out_dir: Some(out.to_path_buf()),
        },
    )?;
    let summary = TrainSummary {
        stages: stages.to_vec(),
        train_scenes: train.len(),
        val_scenes: val.len(),
        stage1_eval: outcome.stage1_eval,
        final_eval: outcome.final_eval,
        best_eval: outcome.best_eval,
        best_checkpoint: out.join(BEST_CHECKPOINT),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub format: SequenceFormat,
    #[serde(flatten)]
    pub report: EvalReport,
    pub mean_reward: f64,
}

/// Scores one format's predictions against ground truth, scene by scene.
/// With `tusimple` the report also carries point accuracy against the
/// keypoint annotation.
pub fn score_format(
    fmt: SequenceFormat,
    scenes: &[SceneRecord],
    preds: &[Vec<Lane>],
    cfg: &RunConfig,
    tau: f64,
    tusimple: bool,
) -> FormatReport {
    let params = MatchParams::with_tau(tau);
    let mut counts = Counts::default();
    let mut points = PointCounts::default();
    let mut reward = 0.0;
    for (rec, p) in scenes.iter().zip(preds) {
        let gts = rec.lanes_for(fmt);
        counts.add(Counts::from_match(&match_lanes(p, &gts, rec.dims(), &params)));
        reward += reward_lanes(fmt, p, &gts, rec.dims(), &cfg.train.rewards, &params).total;
        if tusimple {
            points.add(tusimple_points(p, &rec.polylines, rec.dims()));
        }
    }
    let mut report = counts.report();
    if tusimple {
        report.accuracy = Some(points.accuracy());
    }
    FormatReport { format: fmt, report, mean_reward: reward / scenes.len().max(1) as f64 }
}

fn load_model(ckpt: &Path) -> Result<LaneTransformer, CliError> {
    Ok(checkpoint::load(ckpt)?.0)
}

fn check_dims(model: &LaneTransformer, dims: ImageDims) -> Result<(), CliError> {
    let c = &model.config;
    if dims.width != c.image_width || dims.height != c.image_height {
        return Err(CliError::Usage(format!(
            "image is {}x{} but the checkpoint expects {}x{}",
            dims.width, dims.height, c.image_width, c.image_height
        )));
    }
    Ok(())
}

/// Greedy decode of one image with a format prompt.
pub fn predict(model: &LaneTransformer, img: &GrayImage, fmt: SequenceFormat) -> Result<DecodedScene, CliError> {
    check_dims(model, img.dims())?;
    let enc = model.encode(&image_to_input(img))?;
    let seq = model.greedy_decode(&enc, fmt)?;
    let codec = SceneCodec::new(model.vocab(), img.dims()).with_max_lanes(usize::MAX);
    codec.decode(&seq.tokens).map_err(|e| CliError::Runtime(format!("decoding {} output: {e}", fmt.short_name())))
}

pub fn eval(
    data: &Path,
    ckpt: &Path,
    formats: &[SequenceFormat],
    tau: f64,
    tusimple: bool,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<Vec<FormatReport>, CliError> {
    let model = load_model(ckpt)?;
    let scenes = load_dataset(data)?;
    let mut reports = Vec::new();
    for &fmt in formats {
        let preds: Vec<Vec<Lane>> = scenes
            .par_iter()
            .map(|rec| predict(&model, &rec.image, fmt).map(|d| d.lanes))
            .collect::<Result<_, _>>()?;
        reports.push(score_format(fmt, &scenes, &preds, cfg, tau, tusimple));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        write_json(&dir.join(EVAL_JSON), &reports)?;
        std::fs::write(dir.join(EVAL_CSV), eval_csv(&reports)).map_err(CliError::io(dir.join(EVAL_CSV)))?;
    }
    Ok(reports)
}

pub fn eval_csv(reports: &[FormatReport]) -> String {
    let mut s = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.report.csv_row(r.format.short_name()));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferOutput {
    pub format: SequenceFormat,
    pub lanes: Vec<Lane>,
    pub diagnostics: Vec<laneseq_core::codec::Diagnostic>,
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    GrayImage::from_pgm(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn infer(image: &Path, ckpt: &Path, formats: &[SequenceFormat], render: Option<&Path>) -> Result<Vec<InferOutput>, CliError> {
    let model = load_model(ckpt)?;
    let img = read_pgm(image)?;
    let outputs: Vec<InferOutput> = formats
        .iter()
        .map(|&fmt| {
            predict(&model, &img, fmt).map(|d| InferOutput { format: fmt, lanes: d.lanes, diagnostics: d.diagnostics })
        })
        .collect::<Result<_, _>>()?;
    if let Some(path) = render {
        let lanes: Vec<Lane> = outputs.iter().flat_map(|o| o.lanes.iter().cloned()).collect();
        let ppm = overlay::render(&img, &lanes).to_ppm();
        std::fs::write(path, ppm).map_err(CliError::io(path))?;
    }
    Ok(outputs)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(CliError::io(path))
}

