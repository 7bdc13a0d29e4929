//! Draft records from the LLM, one per target sense. A failing target is
//! reported and skipped; the others are still written.

use crce_core::dataset::{save_dataset, Category, CorefConceptDataset, Violation};
use crce_core::generator::{to_draft_records, GenerationSession};
use serde::Serialize;
use serde_json::json;

use super::{base_config, chat_client, Outcome};
use crate::cli::{GenerateArgs, GlobalArgs};
use crate::error::CliError;
use crate::manifest::{Run, RunStatus};

#[derive(Debug, Serialize)]
struct TargetFailure {
    target: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct DraftSummary {
    id: String,
    violations: Vec<Violation>,
}

/// `target` or `target<TAB>category` per line; blank lines and `#` comments skipped.
fn parse_targets(text: &str, default: Category) -> Result<Vec<(String, Category)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (target, category) = match line.split_once('\t') {
            Some((t, c)) => (
                t,
                c.parse::<Category>().map_err(|e| CliError::Usage(format!("targets line {}: {e}", i + 1)))?,
            ),
            None => (line, default),
        };
        out.push((target.trim().to_string(), category));
    }
    if out.is_empty() {
        return Err(CliError::Usage("targets file lists no targets".into()));
    }
    Ok(out)
}

pub fn run(global: &GlobalArgs, args: GenerateArgs) -> Result<Outcome, CliError> {
    let cfg = base_config(global)?;
    let text = std::fs::read_to_string(&args.targets).map_err(|e| CliError::missing(&args.targets, e))?;
    let targets = parse_targets(&text, args.category)?;
    let client = chat_client(&cfg, args.fixtures.as_deref())?;
    let mut run = Run::create(&global.out, "generate", "targets", &cfg)?;

    let mut records = Vec::new();
    let mut drafts = Vec::new();
    let mut sessions = Vec::new();
    let mut failures = Vec::new();
    for (target, category) in &targets {
        let result = GenerationSession::start(client.as_ref(), target, *category).and_then(|s| {
            let d = to_draft_records(target, *category, s.latest(), cfg.erasure.seed)?;
            Ok((s, d))
        });
        match result {
            Ok((session, draft)) => {
                for d in draft {
                    drafts.push(DraftSummary {
                        id: d.record.id(),
                        violations: d.violations,
                    });
                    records.push(d.record);
                }
                sessions.push(session);
            }
            Err(e) => {
                tracing::warn!(%target, error = %e, "generation failed");
                failures.push(TargetFailure {
                    target: target.clone(),
                    error: e.to_string(),
                });
            }
        }
    }

    let ds = CorefConceptDataset::new(records);
    let dataset_path = run.path("dataset.json");
    save_dataset(&ds, &dataset_path).map_err(CliError::failed)?;
    run.artifact("dataset", &dataset_path)?;
    run.set_dataset_digest(ds.digest());
    run.write_json("drafts", "drafts.json", &drafts)?;
    run.write_json("transcripts", "transcripts.json", &sessions)?;
    run.write_json("failures", "failures.json", &failures)?;
    for d in ds.duplicate_targets() {
        run.note(d.message);
    }
    let status = match (failures.len(), targets.len()) {
        (0, _) => RunStatus::Ok,
        (f, n) if f == n => RunStatus::Failed,
        _ => RunStatus::Partial,
    };
    if !failures.is_empty() {
        run.note(format!("{} of {} targets failed", failures.len(), targets.len()));
    }
    let dir = run.dir.clone();
    run.finish(status)?;
    let mut human = format!("{} draft records -> {}", ds.concepts.len(), dataset_path.display());
    for f in &failures {
        human.push_str(&format!("\nFAILED {}: {}", f.target, f.error));
    }
    Ok(Outcome {
        status,
        json: json!({
            "dir": dir,
            "dataset": dataset_path,
            "records": ds.concepts.iter().map(|r| r.id()).collect::<Vec<_>>(),
            "failures": failures,
        }),
        human,
    })
}
