mod ablate;
mod analyze;
mod generate;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crce_core::backend::DiffusionBackend;
use crce_core::dataset::save_dataset;
use crce_core::eval::compare_reports;
use crce_core::generator::{ChatClient, HttpChatClient, MockChatClient};
use crce_core::trainer::{read_manifest, CheckpointPaths};
use crce_curation::AppState;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use ablate::{cell_configs, CellResult, SweepSummary};

use crate::cli::{Command, EvaluateArgs, GlobalArgs, ReportArgs, RunCellArgs, ServeArgs, TrainArgs};
use crate::config::CliConfig;
use crate::error::CliError;
use crate::manifest::{Run, RunStatus};
use crate::pipeline::{
    checkpoint_weights, dataset_or_toy, evaluate_params, pick_record, read_eval_report, register_checkpoint,
    toy_setup, train_into, write_evaluation,
};

/// What a command hands back to `main` for printing.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: RunStatus,
    pub json: Value,
    pub human: String,
}

impl Outcome {
    fn ok(json: Value, human: impl Into<String>) -> Self {
        Self {
            status: RunStatus::Ok,
            json,
            human: human.into(),
        }
    }
}

pub fn dispatch(global: &GlobalArgs, command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Generate(a) => generate::run(global, a),
        Command::CurateServe(a) => serve(global, a),
        Command::AnalyzeEmbeddings(a) => analyze::run(global, a),
        Command::Train(a) => train(global, a),
        Command::Evaluate(a) => evaluate(global, a),
        Command::Ablate(a) => ablate::run(global, a),
        Command::Report(a) => report(global, a),
        Command::ToyInit => toy_init(global),
        Command::RunCell(a) => run_cell(a),
    }
}

pub(crate) fn base_config(global: &GlobalArgs) -> Result<CliConfig, CliError> {
    let mut cfg = CliConfig::load(global.config.as_deref(), global.preset)?;
    if let Some(s) = global.seed {
        cfg.erasure.seed = s;
    }
    if let Some(j) = global.jobs {
        cfg.evaluation.workers = j.max(1);
    }
    Ok(cfg)
}

pub(crate) fn chat_client(cfg: &CliConfig, fixtures: Option<&Path>) -> Result<Arc<dyn ChatClient>, CliError> {
    match fixtures {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::missing(p, "fixtures not found"));
            }
            Ok(Arc::new(MockChatClient::load(p).map_err(|e| CliError::Usage(e.to_string()))?))
        }
        None => {
            let endpoint = cfg
                .generator
                .clone()
                .ok_or_else(|| CliError::Usage("no LLM configured: add a `generator` section or pass --fixtures".into()))?;
            Ok(Arc::new(HttpChatClient::new(endpoint).map_err(CliError::failed)?))
        }
    }
}

fn train(global: &GlobalArgs, args: TrainArgs) -> Result<Outcome, CliError> {
    let mut cfg = base_config(global)?;
    args.erasure.apply(&mut cfg);
    cfg.erasure.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let setup = toy_setup(&cfg.toy)?;
    let ds = dataset_or_toy(args.dataset.as_deref(), Some(&setup))?;
    let record = pick_record(&ds, args.target.as_deref())?;
    let mut run = Run::create(&global.out, "train", &record.id(), &cfg)?;
    run.set_dataset_digest(ds.digest());
    let (outcome, paths) = match train_into(&run.dir, &record, &cfg, &setup) {
        Ok(v) => v,
        Err(e) => {
            run.note(format!("training failed: {e}"));
            run.finish(RunStatus::Failed)?;
            return Err(e);
        }
    };
    register_checkpoint(&mut run, &paths)?;
    let id = run.id.clone();
    let dir = run.dir.clone();
    run.finish(RunStatus::Ok)?;
    let loss = outcome.manifest.final_loss.as_ref().map(|l| l.total);
    Ok(Outcome::ok(
        json!({
            "run_id": id,
            "dir": dir,
            "steps": outcome.manifest.steps,
            "final_loss": outcome.manifest.final_loss,
            "weights_digest": outcome.manifest.weights_digest,
            "config": cfg.erasure,
        }),
        format!(
            "trained {} for {} steps (final loss {}) -> {}",
            record.id(),
            outcome.manifest.steps,
            loss.map_or("n/a".into(), |l| format!("{l:.6}")),
            dir.display()
        ),
    ))
}

fn evaluate(global: &GlobalArgs, args: EvaluateArgs) -> Result<Outcome, CliError> {
    let mut cfg = base_config(global)?;
    args.eval.apply(&mut cfg);
    let weights = checkpoint_weights(&args.checkpoint)?;
    // evaluation only needs the backend shape, not the base weights
    let mut toy_cfg = cfg.toy.clone();
    toy_cfg.base_weights = Some(weights.clone());
    let setup = toy_setup(&toy_cfg)?;
    let manifest_target = if args.checkpoint.is_dir() {
        read_manifest(&CheckpointPaths::in_dir(&args.checkpoint).manifest).ok().map(|m| m.target)
    } else {
        None
    };
    let ds = dataset_or_toy(args.dataset.as_deref(), Some(&setup))?;
    let record = pick_record(&ds, args.target.as_deref().or(manifest_target.as_deref()))?;
    let mut run = Run::create(&global.out, "evaluate", &record.id(), &cfg)?;
    run.set_dataset_digest(ds.digest());
    run.note(format!(
        "checkpoint {} sha256 {}",
        weights.display(),
        crate::manifest::sha256_file(&weights)?
    ));
    let (report, log) = evaluate_params(&record, setup.base_params.clone(), &cfg, &setup)?;
    write_evaluation(&mut run, &report, &log)?;
    let status = if report.failed_judgements > 0 {
        RunStatus::Partial
    } else {
        RunStatus::Ok
    };
    let id = run.id.clone();
    let dir = run.dir.clone();
    run.finish(status)?;
    let pct = report.percentages();
    Ok(Outcome {
        status,
        human: format!(
            "{}: Acc_U {:.2}  Acc_C train/test {:.2}/{:.2}  Acc_R train/test {:.2}/{:.2}  ({} images/prompt) -> {}",
            record.id(),
            pct[0],
            pct[1],
            pct[2],
            pct[3],
            pct[4],
            report.n_images_per_prompt,
            dir.display()
        ),
        json: json!({"run_id": id, "dir": dir, "report": report}),
    })
}

fn report(global: &GlobalArgs, args: ReportArgs) -> Result<Outcome, CliError> {
    let cfg = base_config(global)?;
    if !args.labels.is_empty() && args.labels.len() != args.inputs.len() {
        return Err(CliError::Usage(format!(
            "{} labels for {} inputs",
            args.labels.len(),
            args.inputs.len()
        )));
    }
    let mut rows = Vec::new();
    for (i, input) in args.inputs.iter().enumerate() {
        let label = args.labels.get(i).cloned().unwrap_or_else(|| label_for(input));
        rows.push((label, read_eval_report(input)?));
    }
    let table = compare_reports(&rows).map_err(CliError::failed)?;
    let mut run = Run::create(&global.out, "report", "comparison", &cfg)?;
    run.write("markdown", "comparison.md", table.markdown.as_bytes())?;
    run.write("csv", "comparison.csv", table.csv.as_bytes())?;
    let dir = run.dir.clone();
    run.finish(RunStatus::Ok)?;
    Ok(Outcome::ok(
        json!({"dir": dir, "rows": rows.iter().map(|(l, r)| json!({"label": l, "report": r})).collect::<Vec<_>>()}),
        table.markdown,
    ))
}

fn label_for(path: &Path) -> String {
    let p = if path.is_file() { path.parent().unwrap_or(path) } else { path };
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn toy_init(global: &GlobalArgs) -> Result<Outcome, CliError> {
    let cfg = base_config(global)?;
    let setup = toy_setup(&cfg.toy)?;
    let mut run = Run::create(&global.out, "toy-init", "toy", &cfg)?;
    let weights = run.path("base_weights.bin");
    setup
        .backend
        .save_weights(&setup.base_params, &weights)
        .map_err(CliError::failed)?;
    run.artifact("base_weights", &weights)?;
    let ds = setup.world.dataset();
    let ds_path = run.path("dataset.json");
    save_dataset(&ds, &ds_path).map_err(CliError::failed)?;
    run.artifact("dataset", &ds_path)?;
    run.set_dataset_digest(ds.digest());
    let dir = run.dir.clone();
    run.finish(RunStatus::Ok)?;
    Ok(Outcome::ok(
        json!({"dir": dir, "base_weights": weights, "dataset": ds_path}),
        format!("toy base weights: {}\ntoy dataset: {}", weights.display(), ds_path.display()),
    ))
}

fn serve(global: &GlobalArgs, args: ServeArgs) -> Result<Outcome, CliError> {
    let cfg = base_config(global)?;
    if !args.dataset.is_file() {
        return Err(CliError::missing(&args.dataset, "dataset not found"));
    }
    let ds = crce_core::dataset::load_dataset(&args.dataset).map_err(|e| CliError::Usage(e.to_string()))?;
    let chat = match (&args.fixtures, &cfg.generator) {
        (None, None) => None,
        (f, _) => Some(chat_client(&cfg, f.as_deref())?),
    };
    let mut run = Run::create(&global.out, "curate-serve", "dataset", &cfg)?;
    run.set_dataset_digest(ds.digest());
    let state = Arc::new(AppState::new(ds, Some(args.dataset.clone()), chat));
    let rt = tokio::runtime::Runtime::new().map_err(CliError::failed)?;
    eprintln!("curation API on http://{} (UI origin {})", args.addr, args.ui_origin);
    let served = rt.block_on(crce_curation::serve(args.addr, state.clone(), &args.ui_origin));
    let final_ds = state.snapshot();
    run.note(format!("final dataset digest {}", final_ds.digest()));
    let dir = run.dir.clone();
    match served {
        Ok(()) => {
            run.finish(RunStatus::Ok)?;
            Ok(Outcome::ok(json!({"dir": dir}), "curation service stopped"))
        }
        Err(e) => {
            run.note(e.to_string());
            run.finish(RunStatus::Failed)?;
            Err(CliError::failed(e))
        }
    }
}

/// Everything a sweep cell needs, written to the cell directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub config: CliConfig,
    pub dataset: Option<PathBuf>,
    pub target: Option<String>,
    pub dir: PathBuf,
}

pub const CELL_SPEC_FILE: &str = "cell_spec.json";

/// Train then evaluate in one directory: `train/` holds the checkpoint,
/// the evaluation report sits at the top.
fn run_cell(args: RunCellArgs) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| CliError::missing(&args.spec, e))?;
    let spec: CellSpec = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("cell spec: {e}")))?;
    let cfg = spec.config.clone();
    let setup = toy_setup(&cfg.toy)?;
    let ds = dataset_or_toy(spec.dataset.as_deref(), Some(&setup))?;
    let record = pick_record(&ds, spec.target.as_deref())?;
    let mut run = Run::at(&spec.dir, "run-cell", &cfg)?;
    run.set_dataset_digest(ds.digest());
    let (outcome, paths) = train_into(&run.path("train"), &record, &cfg, &setup)?;
    register_checkpoint(&mut run, &paths)?;
    let (report, log) = evaluate_params(&record, Arc::new(outcome.params), &cfg, &setup)?;
    write_evaluation(&mut run, &report, &log)?;
    run.finish(RunStatus::Ok)?;
    Ok(Outcome::ok(
        json!({"cell": spec.name, "report": report, "weights_digest": outcome.manifest.weights_digest}),
        format!("cell {} done", spec.name),
    ))
}
