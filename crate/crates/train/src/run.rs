use std::path::{Path, PathBuf};

use laneseq_core::codec::SequenceFormat;
use laneseq_core::synthdata::SceneRecord;
use laneseq_model::{checkpoint, LaneTransformer, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::config::{Stage, TrainConfig};
use crate::data::{augmented_dataset, prepare_dataset, Example};
use crate::eval::{evaluate, EvalSummary};
use crate::optim::AdamW;
use crate::pretrain::pretrain_epoch;
use crate::reinforce::mfrl_epoch;
use crate::TrainError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// One line of the metrics history. `format` is a format short name or
/// `combined`; empty cells are written for values that do not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: Stage,
    pub format: String,
    pub loss: Option<f64>,
    pub reward: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn rows_for(epoch: usize, stage: Stage, eval: &EvalSummary, losses: Option<[f64; 3]>, train_loss: Option<f64>) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = SequenceFormat::ALL
        .iter()
        .map(|f| {
            let e = eval.get(*f);
            MetricsRow {
                epoch,
                stage,
                format: f.short_name().to_string(),
                loss: losses.map(|l| l[f.index()]),
                reward: Some(e.reward),
                precision: Some(e.report.precision),
                recall: Some(e.report.recall),
                f1: Some(e.report.f1),
            }
        })
        .collect();
    rows.push(MetricsRow {
        epoch,
        stage,
        format: "combined".into(),
        loss: train_loss,
        reward: Some(eval.combined_reward),
        precision: None,
        recall: None,
        f1: Some(eval.mean_f1()),
    });
    rows
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    /// Best model of the last stage that ran.
    pub model: LaneTransformer,
    pub history: Vec<MetricsRow>,
    /// Held-out evaluation of the stage-1 result (best stage-1 epoch, or the
    /// initial checkpoint when only stage 2 ran).
    pub stage1_eval: Option<EvalSummary>,
    /// Held-out evaluation after the last epoch of the last stage.
    pub final_eval: EvalSummary,
    pub best_eval: EvalSummary,
}

/// Inputs of a training run.
pub struct RunSpec<'a> {
    pub model_config: ModelConfig,
    pub train: &'a [SceneRecord],
    pub val: &'a [SceneRecord],
    pub stages: &'a [Stage],
    /// Starting weights; required when stage 2 runs without stage 1.
    pub init: Option<LaneTransformer>,
    pub out_dir: Option<PathBuf>,
}

fn save(dir: &Option<PathBuf>, file: &str, model: &LaneTransformer, extra: serde_json::Value) -> Result<(), TrainError> {
    if let Some(d) = dir {
        checkpoint::save(&d.join(file), model, extra)?;
    }
    Ok(())
}

fn flush(dir: &Option<PathBuf>, rows: &[MetricsRow]) -> Result<(), TrainError> {
    match dir {
        Some(d) => write_metrics(&d.join(METRICS_FILE), rows),
        None => Ok(()),
    }
}

/// Stage 1 then stage 2 (whichever are listed), evaluating on the held-out
/// split after every epoch.
pub fn run_training(cfg: &TrainConfig, spec: RunSpec<'_>) -> Result<TrainingOutcome, TrainError> {
    cfg.validate()?;
    let run_pre = spec.stages.contains(&Stage::Pretrain);
    let run_rl = spec.stages.contains(&Stage::Mfrl);
    if run_rl && !run_pre && spec.init.is_none() {
        return Err(TrainError::MissingPretrained);
    }
    let mut model = match spec.init {
        Some(m) => m,
        None => LaneTransformer::new(spec.model_config.clone(), cfg.seed)?,
    };
    if let Some(d) = &spec.out_dir {
        std::fs::create_dir_all(d).map_err(|source| TrainError::Io { path: d.display().to_string(), source })?;
    }
    let vocab = model.vocab();
    let base_train = prepare_dataset(spec.train, vocab, cfg.max_lanes)?;
    let val: Vec<Example> = prepare_dataset(spec.val, vocab, cfg.max_lanes)?;
    let mut history = Vec::new();
    let mut stage1_eval = None;
    let mut last_eval = None;
    let mut best_eval = None;

    if run_pre {
        let mut opt = AdamW::with_betas(&model.store, cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps);
        let mut best: Option<(f64, LaneTransformer, EvalSummary)> = None;
        for epoch in 1..=cfg.pretrain_epochs {
            let stats = if cfg.augment {
                let aug = augmented_dataset(spec.train, vocab, cfg.max_lanes, &cfg.augmentation, cfg.seed, epoch)?;
                pretrain_epoch(&aug, &mut model, &mut opt, cfg, epoch)?
            } else {
                pretrain_epoch(&base_train, &mut model, &mut opt, cfg, epoch)?
            };
            let eval = evaluate(&model, &val, cfg.tau, &cfg.rewards)?;
            log::info!(
                "pretrain epoch {epoch}: loss {:.4} f1 seg {:.3} anchor {:.3} param {:.3}",
                stats.mean_loss(),
                eval.formats[0].report.f1,
                eval.formats[1].report.f1,
                eval.formats[2].report.f1
            );
            history.extend(rows_for(epoch, Stage::Pretrain, &eval, Some(stats.loss), Some(stats.mean_loss())));
            flush(&spec.out_dir, &history)?;
            if best.as_ref().is_none_or(|(f, _, _)| eval.mean_f1() > *f) {
                best = Some((eval.mean_f1(), model.clone(), eval));
            }
            last_eval = Some(eval);
        }
        if let Some((_, m, e)) = best {
            model = m;
            stage1_eval = Some(e);
            best_eval = Some(e);
            let extra = serde_json::json!({ "stage": "pretrain", "eval": e });
            save(&spec.out_dir, PRETRAIN_CHECKPOINT, &model, extra.clone())?;
            if !run_rl {
                save(&spec.out_dir, BEST_CHECKPOINT, &model, extra)?;
            }
        }
    }

    if run_rl {
        let start = match stage1_eval {
            Some(e) => e,
            None => evaluate(&model, &val, cfg.tau, &cfg.rewards)?,
        };
        stage1_eval = Some(start);
        history.extend(rows_for(0, Stage::Mfrl, &start, None, None));
        flush(&spec.out_dir, &history)?;
        let lr = cfg.stage_learning_rate(Stage::Mfrl);
        let mut opt = AdamW::with_betas(&model.store, lr, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps);
        let mut best = (start.combined_reward, model.clone(), start, 0usize);
        last_eval = Some(start);
        for epoch in 1..=cfg.mfrl_epochs {
            let stats = mfrl_epoch(&base_train, &mut model, &mut opt, cfg, epoch)?;
            let eval = evaluate(&model, &val, cfg.tau, &cfg.rewards)?;
            log::info!(
                "mfrl epoch {epoch}: sample reward {:?} |adv| {:.4} held-out combined reward {:.4}",
                stats.reward,
                stats.mean_abs_advantage,
                eval.combined_reward
            );
            history.extend(rows_for(epoch, Stage::Mfrl, &eval, None, None));
            flush(&spec.out_dir, &history)?;
            if eval.combined_reward > best.0 {
                best = (eval.combined_reward, model.clone(), eval, epoch);
            }
            last_eval = Some(eval);
        }
        let (_, m, e, epoch) = best;
        save(&spec.out_dir, BEST_CHECKPOINT, &m, serde_json::json!({ "stage": "mfrl", "epoch": epoch, "eval": e }))?;
        model = m;
        best_eval = Some(e);
    }

    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(&model, &val, cfg.tau, &cfg.rewards)?,
    };
    Ok(TrainingOutcome { model, history, stage1_eval, final_eval, best_eval: best_eval.unwrap_or(final_eval) })
}
