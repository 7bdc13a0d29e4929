//! Distance tables from a target to its corefs and retains.

use std::path::PathBuf;

use crce_clip::{clip_dir_from_env, ClipTextEncoder, ClipVariant, CLIP_DIR_ENV};
use crce_core::embedding::{
    compare_with_reference, distance_report, euclidean_order_holds, DistanceReport, EmbeddingCache, Pooling,
    ReferenceCheck, ReferenceTable, TextEncoder,
};
use serde_json::json;

use super::{base_config, Outcome};
use crate::cli::{AnalyzeArgs, EncoderKind, GlobalArgs};
use crate::config::PoolingChoice;
use crate::error::CliError;
use crate::manifest::{Run, RunStatus};
use crate::pipeline::{dataset_or_toy, pick_record, toy_setup};

/// Texts whose Euclidean distances to "dog" must increase in this order.
pub const REFERENCE_ORDER: [&str; 4] = ["cat", "pig", "service dog", "guide dog"];

fn clip_encoder(dir: &Option<PathBuf>, pooling: Pooling, project: bool) -> Result<Box<dyn TextEncoder>, CliError> {
    let dir = dir.clone().or_else(clip_dir_from_env).ok_or_else(|| {
        CliError::Usage(format!("the clip encoder needs --clip-dir, clip.dir in the config, or {CLIP_DIR_ENV}"))
    })?;
    if !dir.is_dir() {
        return Err(CliError::missing(&dir, "CLIP weights directory not found"));
    }
    let enc = ClipTextEncoder::load(&dir, ClipVariant::VitL14, pooling, project).map_err(|e| match e {
        crce_core::embedding::EmbeddingError::EncoderUnavailable(m) => CliError::missing(&dir, m),
        other => CliError::failed(other),
    })?;
    Ok(Box::new(enc))
}

struct ReferenceResult {
    report: DistanceReport,
    checks: Vec<ReferenceCheck>,
    order_ok: bool,
}

impl ReferenceResult {
    fn passed(&self) -> bool {
        self.order_ok && self.checks.iter().all(|c| c.ok)
    }
}

fn measure_reference(
    encoder: &mut dyn TextEncoder,
    cache: &mut EmbeddingCache,
) -> Result<ReferenceResult, CliError> {
    let table = ReferenceTable::dog();
    let report = table.reproduce(encoder, Some(cache)).map_err(CliError::failed)?;
    let checks = compare_with_reference(&report, &table);
    let order_ok = euclidean_order_holds(&report, &REFERENCE_ORDER);
    Ok(ReferenceResult { report, checks, order_ok })
}

pub fn run(global: &GlobalArgs, args: AnalyzeArgs) -> Result<Outcome, CliError> {
    let mut cfg = base_config(global)?;
    if let Some(d) = &args.clip_dir {
        cfg.clip.dir = Some(d.clone());
    }
    if let Some(p) = args.pooling {
        cfg.clip.pooling = p;
    }
    if args.reference && args.encoder == EncoderKind::Toy {
        return Err(CliError::Usage("--reference measures a real text encoder; pass --encoder clip".into()));
    }
    let label = if args.reference { "dog-reference".to_string() } else { args.target.clone().unwrap_or_default() };
    let mut run = Run::create(&global.out, "analyze-embeddings", &label, &cfg)?;
    let cache_path = match &args.dataset {
        Some(p) => EmbeddingCache::path_for_dataset(p),
        None => run.path("embeddings_cache.json"),
    };
    let mut cache = EmbeddingCache::open(&cache_path).map_err(CliError::failed)?;

    let (report, reference) = if args.reference {
        let attempts: &[Pooling] = match (args.encoder, cfg.clip.pooling) {
            (_, PoolingChoice::Eos) => &[Pooling::Eos],
            (_, PoolingChoice::Mean) => &[Pooling::MeanTokens],
            (_, PoolingChoice::Auto) => &[Pooling::Eos, Pooling::MeanTokens],
        };
        let mut last = None;
        for &pooling in attempts {
            let mut enc = clip_encoder(&cfg.clip.dir, pooling, cfg.clip.project)?;
            let r = measure_reference(enc.as_mut(), &mut cache)?;
            run.note(format!(
                "pooling {pooling:?}: {} of {} rows within tolerance, order {}",
                r.checks.iter().filter(|c| c.ok).count(),
                r.checks.len(),
                if r.order_ok { "holds" } else { "violated" }
            ));
            let done = r.passed();
            last = Some((pooling, r));
            if done {
                break;
            }
        }
        let (pooling, r) = last.expect("at least one pooling attempt");
        run.note(format!("selected pooling {pooling:?}"));
        let summary = json!({
            "pooling": pooling,
            "passed": r.passed(),
            "order_holds": r.order_ok,
            "checks": r.checks,
        });
        (r.report, Some(summary))
    } else {
        let setup = match args.encoder {
            EncoderKind::Toy => Some(toy_setup(&cfg.toy)?),
            EncoderKind::Clip => None,
        };
        let ds = dataset_or_toy(args.dataset.as_deref(), setup.as_ref())?;
        run.set_dataset_digest(ds.digest());
        let record = pick_record(&ds, args.target.as_deref())?;
        let mut enc: Box<dyn TextEncoder> = match &setup {
            Some(s) => Box::new(s.encoder()),
            None => {
                let pooling = match cfg.clip.pooling {
                    PoolingChoice::Mean => Pooling::MeanTokens,
                    // auto needs the reference table to choose; eos otherwise
                    PoolingChoice::Eos | PoolingChoice::Auto => Pooling::Eos,
                };
                clip_encoder(&cfg.clip.dir, pooling, cfg.clip.project)?
            }
        };
        let report = distance_report(&record.target, &record, enc.as_mut(), Some(&mut cache)).map_err(CliError::failed)?;
        (report, None)
    };
    cache.save().map_err(CliError::failed)?;

    run.write("distances_csv", "distances.csv", report.to_csv().as_bytes())?;
    run.write_json("distances", "distances.json", &report)?;
    if let Some(r) = &reference {
        run.write_json("reference_check", "reference_check.json", r)?;
    }
    let status = match &reference {
        Some(r) if r["passed"] != json!(true) => RunStatus::Partial,
        _ => RunStatus::Ok,
    };
    if !report.all_identities_hold() {
        run.note("norm identity violated on at least one row");
    }
    let dir = run.dir.clone();
    run.finish(status)?;
    let mut human = format!("{} via {} -> {}\n{}", report.target, report.encoder, dir.display(), report.to_csv());
    if let Some(r) = &reference {
        human.push_str(&format!("reference check passed: {}\n", r["passed"]));
    }
    Ok(Outcome {
        status,
        json: json!({"dir": dir, "report": report, "reference": reference}),
        human,
    })
}
