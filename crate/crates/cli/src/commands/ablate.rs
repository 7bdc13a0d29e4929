//! Sweeps: every cell is a `run-cell` subprocess with its own directory,
//! at most `--jobs` at a time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crce_core::backend::DiffusionBackend;
use crce_core::dataset::save_dataset;
use crce_core::eval::{compare_reports, EvalGroup, EvalReport};
use crce_core::trainer::{CertaintyMode, NoiseSide};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{base_config, CellSpec, Outcome, CELL_SPEC_FILE};
use crate::cli::{AblateArgs, GlobalArgs, SweepKind};
use crate::config::CliConfig;
use crate::error::CliError;
use crate::manifest::{Run, RunStatus};
use crate::pipeline::{dataset_or_toy, pick_record, read_eval_report, toy_setup};

pub const MN_VALUES: [usize; 4] = [1, 3, 5, 10];

/// Environment override for the executable that runs cells.
pub const CELL_BIN_ENV: &str = "CRCE_CELL_BIN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub dir: PathBuf,
    pub ok: bool,
    pub report: Option<EvalReport>,
    pub weights_digest: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sweep: String,
    pub cells: Vec<CellResult>,
}

fn sweep_name(kind: SweepKind) -> &'static str {
    match kind {
        SweepKind::MnGrid => "mn_grid",
        SweepKind::Certainty => "certainty",
    }
}

/// Cell names and configs for one sweep axis, in table order.
pub fn cell_configs(base: &CliConfig, kind: SweepKind) -> Vec<(String, CliConfig)> {
    let mut out = Vec::new();
    match kind {
        SweepKind::MnGrid => {
            for m in MN_VALUES {
                for n in MN_VALUES {
                    let mut c = base.clone();
                    c.erasure.m = m;
                    c.erasure.n = n;
                    out.push((format!("m{m}_n{n}"), c));
                }
            }
        }
        SweepKind::Certainty => {
            let mut nocert = base.clone();
            nocert.erasure.certainty_mode = CertaintyMode::UniformOne;
            out.push(("CRCE-nocert".to_string(), nocert));
            let rows: [(NoiseSide, &str, &[f64]); 3] = [
                (NoiseSide::Coref, "coref", &[0.0, 0.2, 0.4]),
                (NoiseSide::Retain, "retain", &[0.0, 0.2, 0.4]),
                (NoiseSide::Both, "both", &[0.2, 0.4]),
            ];
            for (side, label, sigmas) in rows {
                for &s in sigmas {
                    let mut c = base.clone();
                    c.erasure.certainty_mode = CertaintyMode::Noise;
                    c.erasure.noise_side = side;
                    c.erasure.noise_sigma = s;
                    out.push((format!("CRCE-{label}-{s}"), c));
                }
            }
        }
    }
    out
}

fn cell_binary() -> Result<PathBuf, CliError> {
    match std::env::var_os(CELL_BIN_ENV) {
        Some(p) => Ok(PathBuf::from(p)),
        None => std::env::current_exe().map_err(CliError::failed),
    }
}

fn run_one(bin: &Path, spec_path: &Path, dir: &Path, name: &str) -> CellResult {
    let fail = |error: String| CellResult {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        ok: false,
        report: None,
        weights_digest: None,
        error: Some(error),
    };
    let output = match Command::new(bin).arg("run-cell").arg("--spec").arg(spec_path).arg("--json").output() {
        Ok(o) => o,
        Err(e) => return fail(format!("could not start {}: {e}", bin.display())),
    };
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        let tail: Vec<&str> = stderr.lines().rev().take(5).collect();
        return fail(format!(
            "cell exited with {}: {}",
            output.status,
            tail.into_iter().rev().collect::<Vec<_>>().join(" | ")
        ));
    }
    let report = match read_eval_report(dir) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let weights_digest = crce_core::trainer::read_manifest(&dir.join("train").join("manifest.json"))
        .ok()
        .map(|m| m.weights_digest);
    CellResult {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        ok: true,
        report: Some(report),
        weights_digest,
        error: None,
    }
}

/// Runs the specs with at most `jobs` concurrent subprocesses; results keep
/// the input order.
fn run_cells(bin: &Path, specs: &[(PathBuf, CellSpec)], jobs: usize) -> Vec<CellResult> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; specs.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(specs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((path, spec)) = specs.get(i) else { break };
                tracing::info!(cell = %spec.name, "starting cell");
                let r = run_one(bin, path, &spec.dir, &spec.name);
                if let Some(e) = &r.error {
                    tracing::warn!(cell = %spec.name, error = %e, "cell failed");
                }
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

const METRICS: [(EvalGroup, &str); 5] = [
    (EvalGroup::Target, "Acc_U"),
    (EvalGroup::CorefTrain, "Acc_C^train"),
    (EvalGroup::CorefTest, "Acc_C^test"),
    (EvalGroup::RetainTrain, "Acc_R^train"),
    (EvalGroup::RetainTest, "Acc_R^test"),
];

fn fmt_cell(c: Option<&CellResult>, g: EvalGroup) -> String {
    match c.and_then(|c| c.report.as_ref()) {
        Some(r) => format!("{:.2}", r.metric(g) * 100.0),
        None => "FAILED".into(),
    }
}

/// One M-rows × N-columns table per metric.
fn mn_tables(cells: &[CellResult]) -> (String, String) {
    let by_name: BTreeMap<&str, &CellResult> = cells.iter().map(|c| (c.name.as_str(), c)).collect();
    let mut md = String::new();
    for (g, label) in METRICS {
        let _ = writeln!(md, "### {label}\n");
        let _ = writeln!(
            md,
            "| M \\ N | {} |",
            MN_VALUES.map(|n| n.to_string()).join(" | ")
        );
        let _ = writeln!(md, "|---|{}", "---:|".repeat(MN_VALUES.len()));
        for m in MN_VALUES {
            let row: Vec<String> = MN_VALUES
                .iter()
                .map(|n| fmt_cell(by_name.get(format!("m{m}_n{n}").as_str()).copied(), g))
                .collect();
            let _ = writeln!(md, "| {m} | {} |", row.join(" | "));
        }
        md.push('\n');
    }
    let mut csv = String::from("m,n,acc_u,acc_c_train,acc_c_test,acc_r_train,acc_r_test,status\n");
    for m in MN_VALUES {
        for n in MN_VALUES {
            let c = by_name.get(format!("m{m}_n{n}").as_str()).copied();
            let vals: Vec<String> = METRICS.iter().map(|(g, _)| fmt_cell(c, *g)).collect();
            let status = if c.is_some_and(|c| c.ok) { "ok" } else { "failed" };
            let _ = writeln!(csv, "{m},{n},{},{status}", vals.join(","));
        }
    }
    (md, csv)
}

/// Variant rows; failed cells are listed below the table.
fn certainty_table(cells: &[CellResult]) -> Result<(String, String), CliError> {
    let rows: Vec<(String, EvalReport)> = cells
        .iter()
        .filter_map(|c| c.report.clone().map(|r| (c.name.clone(), r)))
        .collect();
    let failed: Vec<&str> = cells.iter().filter(|c| !c.ok).map(|c| c.name.as_str()).collect();
    if rows.is_empty() {
        return Ok((format!("all cells failed: {}\n", failed.join(", ")), String::new()));
    }
    let t = compare_reports(&rows).map_err(CliError::failed)?;
    let mut md = t.markdown;
    if !failed.is_empty() {
        let _ = writeln!(md, "\nFailed cells: {}", failed.join(", "));
    }
    Ok((md, t.csv))
}

pub fn run(global: &GlobalArgs, args: AblateArgs) -> Result<Outcome, CliError> {
    if args.sweep.is_empty() {
        return Err(CliError::Usage("--sweep needs at least one of: mn-grid, certainty".into()));
    }
    let mut cfg = base_config(global)?;
    args.erasure.apply(&mut cfg);
    args.eval.apply(&mut cfg);
    cfg.erasure.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let setup = toy_setup(&cfg.toy)?;
    let ds = dataset_or_toy(args.dataset.as_deref(), Some(&setup))?;
    let record = pick_record(&ds, args.target.as_deref())?;
    let mut run = Run::create(&global.out, "ablate", &record.id(), &cfg)?;
    run.set_dataset_digest(ds.digest());

    // pin base weights and dataset to files so every cell sees the same inputs
    let mut cell_base = cfg.clone();
    if cell_base.toy.base_weights.is_none() {
        let p = run.path("base_weights.bin");
        setup.backend.save_weights(&setup.base_params, &p).map_err(CliError::failed)?;
        run.artifact("base_weights", &p)?;
        cell_base.toy.base_weights = Some(std::path::absolute(&p).map_err(CliError::failed)?);
    }
    let dataset = match &args.dataset {
        Some(p) => std::path::absolute(p).map_err(CliError::failed)?,
        None => {
            let p = run.path("dataset.json");
            save_dataset(&ds, &p).map_err(CliError::failed)?;
            run.artifact("dataset", &p)?;
            std::path::absolute(&p).map_err(CliError::failed)?
        }
    };

    let bin = cell_binary()?;
    let jobs = global
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()).min(4));
    let mut summaries = Vec::new();
    let mut human = String::new();
    for kind in &args.sweep {
        let name = sweep_name(*kind);
        let mut specs = Vec::new();
        for (cell, c) in cell_configs(&cell_base, *kind) {
            let dir = std::path::absolute(run.path(&format!("cells/{name}/{cell}"))).map_err(CliError::failed)?;
            std::fs::create_dir_all(&dir).map_err(CliError::failed)?;
            let spec = CellSpec {
                name: cell,
                config: c,
                dataset: Some(dataset.clone()),
                target: Some(record.id()),
                dir: dir.clone(),
            };
            let spec_path = dir.join(CELL_SPEC_FILE);
            std::fs::write(&spec_path, serde_json::to_vec_pretty(&spec).expect("spec serializes"))
                .map_err(CliError::failed)?;
            specs.push((spec_path, spec));
        }
        let cells = run_cells(&bin, &specs, jobs);
        let (md, csv) = match kind {
            SweepKind::MnGrid => mn_tables(&cells),
            SweepKind::Certainty => certainty_table(&cells)?,
        };
        run.write(&format!("{name}_table_md"), &format!("{name}.md"), md.as_bytes())?;
        run.write(&format!("{name}_table_csv"), &format!("{name}.csv"), csv.as_bytes())?;
        let _ = writeln!(human, "## {name}\n\n{md}");
        summaries.push(SweepSummary {
            sweep: name.into(),
            cells,
        });
    }
    run.write_json("summary", "sweep_summary.json", &summaries)?;
    let total: usize = summaries.iter().map(|s| s.cells.len()).sum();
    let failed: usize = summaries.iter().map(|s| s.cells.iter().filter(|c| !c.ok).count()).sum();
    let status = match failed {
        0 => RunStatus::Ok,
        f if f == total => RunStatus::Failed,
        _ => RunStatus::Partial,
    };
    if failed > 0 {
        run.note(format!("{failed} of {total} cells failed"));
    }
    let dir = run.dir.clone();
    run.finish(status)?;
    Ok(Outcome {
        status,
        json: json!({"dir": dir, "sweeps": summaries}),
        human,
    })
}
