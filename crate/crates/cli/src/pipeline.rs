//! Shared train/evaluate steps used by standalone commands and sweep cells,
//! so both paths produce identical artifacts for identical configs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crce_core::backend::DiffusionBackend;
use crce_core::dataset::{load_dataset, ConceptRecord, CorefConceptDataset};
use crce_core::eval::{
    evaluate_record, write_verdict_log, EvalReport, FixtureJudge, HttpVlmJudge, ImageGenerator, Judge,
    MetadataImageGenerator, VerdictRecord,
};
use crce_core::toy::{pretrain, ToySetup, ToyWorld};
use crce_core::trainer::{run_training, write_checkpoint, CheckpointPaths, TrainError, TrainingOutcome};

use crate::config::{CliConfig, JudgeKind, ToyBackendConfig};
use crate::error::CliError;
use crate::manifest::Run;

pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";

/// Toy world and backend with base weights loaded (or pretrained).
pub fn toy_setup(cfg: &ToyBackendConfig) -> Result<ToySetup, CliError> {
    let (world, backend) = ToySetup::untrained(ToyWorld::new(cfg.world_seed), cfg.model.clone());
    let params = match &cfg.base_weights {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::missing(p, "base weights not found"));
            }
            backend.load_weights(p).map_err(CliError::failed)?
        }
        None => pretrain(&world, &backend, &cfg.pretrain),
    };
    Ok(ToySetup {
        world,
        backend,
        base_params: Arc::new(params),
    })
}

/// The named dataset, or the toy world's own dataset when none is given.
pub fn dataset_or_toy(path: Option<&Path>, setup: Option<&ToySetup>) -> Result<CorefConceptDataset, CliError> {
    match (path, setup) {
        (Some(p), _) => {
            if !p.is_file() {
                return Err(CliError::missing(p, "dataset not found"));
            }
            load_dataset(p).map_err(|e| CliError::Usage(e.to_string()))
        }
        (None, Some(s)) => Ok(s.world.dataset()),
        (None, None) => Err(CliError::Usage("--dataset is required".into())),
    }
}

/// Looks a record up by id or target; a single-record dataset needs no name.
pub fn pick_record(ds: &CorefConceptDataset, target: Option<&str>) -> Result<ConceptRecord, CliError> {
    match target {
        Some(t) => ds
            .find(t)
            .cloned()
            .or_else(|_| {
                ds.concepts
                    .iter()
                    .find(|r| r.target.eq_ignore_ascii_case(t))
                    .cloned()
                    .ok_or(())
            })
            .map_err(|_| CliError::Usage(format!("no record for target {t:?}"))),
        None if ds.concepts.len() == 1 => Ok(ds.concepts[0].clone()),
        None => Err(CliError::Usage("--target is required for multi-record datasets".into())),
    }
}

/// Trains into `dir` (weights.bin, manifest.json, train_log.jsonl).
pub fn train_into(
    dir: &Path,
    record: &ConceptRecord,
    cfg: &CliConfig,
    setup: &ToySetup,
) -> Result<(TrainingOutcome, CheckpointPaths), CliError> {
    let mut encoder = setup.encoder();
    let outcome = run_training(record, &cfg.erasure, setup.backend.as_ref(), &mut encoder, &setup.base_params)
        .map_err(|e| match e {
            TrainError::Config(c) => CliError::Usage(c.to_string()),
            e @ (TrainError::SampleSize { .. } | TrainError::InvalidRecord(_)) => CliError::Usage(e.to_string()),
            other => CliError::failed(other),
        })?;
    let paths = write_checkpoint(dir, setup.backend.as_ref(), &outcome).map_err(CliError::failed)?;
    Ok((outcome, paths))
}

pub fn register_checkpoint(run: &mut Run, paths: &CheckpointPaths) -> Result<(), CliError> {
    run.artifact("weights", &paths.weights)?;
    run.artifact("checkpoint_manifest", &paths.manifest)?;
    run.artifact("train_log", &paths.log)
}

/// Resolves a run directory or weights file to the weights path.
pub fn checkpoint_weights(path: &Path) -> Result<PathBuf, CliError> {
    let weights = if path.is_dir() {
        CheckpointPaths::in_dir(path).weights
    } else {
        path.to_path_buf()
    };
    if !weights.is_file() {
        return Err(CliError::missing(&weights, "checkpoint not found"));
    }
    Ok(weights)
}

type EvalPair = (Box<dyn ImageGenerator>, Box<dyn Judge>);

fn judge_and_generator(
    cfg: &CliConfig,
    setup: &ToySetup,
    params: Arc<Vec<f64>>,
) -> Result<EvalPair, CliError> {
    Ok(match cfg.evaluation.judge {
        JudgeKind::Toy => (Box::new(setup.generator(params)), Box::new(setup.judge())),
        JudgeKind::Fixtures => {
            let path = cfg
                .evaluation
                .fixtures
                .as_ref()
                .ok_or_else(|| CliError::Usage("judge=fixtures needs --judge-fixtures".into()))?;
            if !path.is_file() {
                return Err(CliError::missing(path, "judge fixtures not found"));
            }
            let judge = FixtureJudge::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
            (Box::new(MetadataImageGenerator), Box::new(judge))
        }
        JudgeKind::Http => {
            return Err(CliError::Usage(
                "the http judge needs an image-producing backend; the toy backend emits 2-D points".into(),
            ))
        }
    })
}

/// Remote judge for callers that bring their own image generator.
pub fn http_judge(cfg: &CliConfig) -> Result<HttpVlmJudge, CliError> {
    let endpoint = cfg
        .judge
        .clone()
        .ok_or_else(|| CliError::Usage("config has no `judge` endpoint section".into()))?;
    HttpVlmJudge::new(endpoint).map_err(CliError::failed)
}

pub fn evaluate_params(
    record: &ConceptRecord,
    params: Arc<Vec<f64>>,
    cfg: &CliConfig,
    setup: &ToySetup,
) -> Result<(EvalReport, Vec<VerdictRecord>), CliError> {
    let (generator, judge) = judge_and_generator(cfg, setup, params)?;
    evaluate_record(record, generator.as_ref(), judge.as_ref(), &cfg.evaluation.options()).map_err(CliError::failed)
}

/// Writes the report and verdict log into the run and registers both.
pub fn write_evaluation(run: &mut Run, report: &EvalReport, log: &[VerdictRecord]) -> Result<(), CliError> {
    run.write_json("eval_report", EVAL_REPORT_FILE, report)?;
    let path = run.path(VERDICTS_FILE);
    write_verdict_log(&path, log).map_err(CliError::failed)?;
    run.artifact("verdicts", &path)
}

pub fn read_eval_report(path: &Path) -> Result<EvalReport, CliError> {
    let file = if path.is_dir() { path.join(EVAL_REPORT_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::missing(&file, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::failed(format!("{}: {e}", file.display())))
}
