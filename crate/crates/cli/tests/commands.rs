//! End-to-end runs of the `crce` binary on the toy backend.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use crce_core::dataset::{load_dataset, sample_dataset};
use crce_core::eval::{group_prompts, CorefCriterion, EvalGroup, FixtureJudge};
use crce_core::generator::{build_generation_prompt, record_to_proposal, render_proposal, request_hash, Fixture};
use serde_json::Value;

struct Out {
    code: i32,
    json: Value,
    stderr: String,
}

fn crce(cwd: &Path, args: &[&str]) -> Out {
    let out = Command::new(env!("CARGO_BIN_EXE_crce"))
        .current_dir(cwd)
        .arg("--json")
        .args(args)
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout);
    Out {
        code: out.status.code().unwrap_or(-1),
        json: serde_json::from_str(stdout.trim()).unwrap_or(Value::Null),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(cwd: &Path, args: &[&str]) -> Value {
    let o = crce(cwd, args);
    assert_eq!(o.code, 0, "crce {args:?} failed: {}", o.stderr);
    o.json["result"].clone()
}

/// Base weights and dataset from `toy-init`.
fn toy_init(cwd: &Path) -> (PathBuf, PathBuf) {
    let r = ok(cwd, &["--preset", "toy", "toy-init"]);
    let p = |k: &str| cwd.join(r[k].as_str().unwrap());
    (p("base_weights"), p("dataset"))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn default_hyperparameters_land_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, ds) = toy_init(tmp.path());
    let r = ok(
        tmp.path(),
        &["train", "--base", base.to_str().unwrap(), "--dataset", ds.to_str().unwrap(), "--iterations", "3"],
    );
    let m = manifest(&tmp.path().join(r["dir"].as_str().unwrap()));
    let e = &m["config"]["erasure"];
    assert_eq!(e["eta"], 1.0);
    assert_eq!(e["learning_rate"], 1e-5);
    assert_eq!(e["m"], 5);
    assert_eq!(e["n"], 3);
    assert_eq!(e["variant"], "crce");
    assert_eq!(m["status"], "ok");
    for a in ["weights", "checkpoint_manifest", "train_log"] {
        assert!(m["artifacts"][a]["sha256"].as_str().is_some_and(|s| s.len() == 64), "{a}");
    }

    // default iteration count when the flag is absent
    let r = crce(tmp.path(), &["train", "--variant", "crce_sphere"]);
    assert_eq!(r.code, 2);
    let cfg = crce_cli::config::CliConfig::load(None, None).unwrap();
    assert_eq!(cfg.erasure.iterations, 500);
}

#[test]
fn sphere_variant_needs_a_radius() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, _) = toy_init(tmp.path());
    let b = base.to_str().unwrap();
    let r = crce(tmp.path(), &["train", "--base", b, "--variant", "crce_sphere"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("sphere_radius"), "{}", r.stderr);
    assert_eq!(r.json["status"], "error");
    let r = ok(
        tmp.path(),
        &["train", "--base", b, "--variant", "crce_sphere", "--sphere-radius", "0.5", "--iterations", "2"],
    );
    assert_eq!(r["steps"], 2);
}

#[test]
fn zero_iterations_reproduce_the_base_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, _) = toy_init(tmp.path());
    let r = ok(tmp.path(), &["train", "--base", base.to_str().unwrap(), "--iterations", "0"]);
    assert_eq!(r["steps"], 0);
    assert!(r["final_loss"].is_null());
    let weights = tmp.path().join(r["dir"].as_str().unwrap()).join("weights.bin");
    assert_eq!(std::fs::read(weights).unwrap(), std::fs::read(&base).unwrap());
}

#[test]
fn missing_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let r = crce(tmp.path(), &["evaluate", "--checkpoint", "no/such/run"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("checkpoint not found"));
    assert_eq!(crce(tmp.path(), &["--config", "absent.json", "train"]).code, 2);
    std::fs::write(tmp.path().join("bad.json"), r#"{"erasure": {"etaa": 2}}"#).unwrap();
    assert_eq!(crce(tmp.path(), &["--config", "bad.json", "train"]).code, 2);
    assert_eq!(crce(tmp.path(), &["train", "--base", "nope.bin"]).code, 2);
    assert_eq!(crce(tmp.path(), &["ablate"]).code, 2);
    assert_eq!(crce(tmp.path(), &["train", "--lr=-1"]).code, 2);
    assert_eq!(crce(tmp.path(), &["train", "--m", "20"]).code, 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, _) = toy_init(tmp.path());
    std::fs::write(
        tmp.path().join("cfg.json"),
        r#"{"preset": "toy", "erasure": {"m": 4, "n": 1, "iterations": 2}}"#,
    )
    .unwrap();
    let r = ok(
        tmp.path(),
        &["--config", "cfg.json", "train", "--base", base.to_str().unwrap(), "--n", "2"],
    );
    assert_eq!(r["config"]["m"], 4);
    assert_eq!(r["config"]["n"], 2);
    assert_eq!(r["config"]["learning_rate"], 1e-2);
    assert_eq!(r["steps"], 2);
}

#[test]
fn identical_seeds_give_identical_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, _) = toy_init(tmp.path());
    let b = base.to_str().unwrap();
    let args = ["--preset", "toy", "--seed", "11", "train", "--base", b, "--iterations", "20"];
    let first = ok(tmp.path(), &args);
    let second = ok(tmp.path(), &args);
    assert_ne!(first["dir"], second["dir"]);
    assert_eq!(first["weights_digest"], second["weights_digest"]);
    let other = ok(tmp.path(), &["--preset", "toy", "--seed", "12", "train", "--base", b, "--iterations", "20"]);
    assert_ne!(first["weights_digest"], other["weights_digest"]);
}

#[test]
fn generate_isolates_failing_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let sample = sample_dataset();
    let mut fixtures = Vec::new();
    for key in ["Horse", "Tom Cruise"] {
        let rec = sample.concepts.iter().find(|r| r.target == key).unwrap();
        let prompt = build_generation_prompt(&rec.target, rec.category).unwrap();
        fixtures.push(Fixture {
            request_hash: request_hash(&prompt),
            response_text: render_proposal(&[record_to_proposal(rec)]),
        });
    }
    std::fs::write(tmp.path().join("llm.json"), serde_json::to_string(&fixtures).unwrap()).unwrap();
    std::fs::write(tmp.path().join("targets.txt"), "Horse\n# skipped\nUnicorn\nTom Cruise\tcelebrity\n").unwrap();
    let r = crce(tmp.path(), &["generate", "--targets", "targets.txt", "--fixtures", "llm.json"]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert_eq!(r.json["status"], "partial");
    let res = &r.json["result"];
    assert_eq!(res["failures"].as_array().unwrap().len(), 1);
    assert_eq!(res["failures"][0]["target"], "Unicorn");
    let ds = load_dataset(tmp.path().join(res["dataset"].as_str().unwrap())).unwrap();
    let targets: Vec<&str> = ds.concepts.iter().map(|c| c.target.as_str()).collect();
    assert_eq!(targets, ["Horse", "Tom Cruise"]);
    for c in &ds.concepts {
        assert!(!c.is_approved());
        assert_eq!((c.corefs.train.len(), c.corefs.test.len()), (10, 5));
        assert_eq!((c.retains.train.len(), c.retains.test.len()), (10, 5));
    }
}

#[test]
fn fixture_evaluation_matches_a_brute_force_count() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, _) = toy_init(tmp.path());
    let record = sample_dataset().find("horse").unwrap().clone();
    let ds = crce_core::dataset::CorefConceptDataset::new(vec![record.clone()]);
    crce_core::dataset::save_dataset(&ds, tmp.path().join("horse.json")).unwrap();

    let images = 6u64;
    let groups = group_prompts(&record, CorefCriterion::Target);
    let mut judge = FixtureJudge::default();
    let mut expected = BTreeMap::new();
    let mut k = 0u64;
    for (g, prompts) in &groups {
        let (mut yes, mut total) = (0, 0);
        for p in prompts {
            for s in 0..images {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if (k >> 33).is_multiple_of(3) {
                    judge.responses.insert(format!("{}#{s}", p.prompt), "Yes, clearly.".into());
                    yes += 1;
                }
                total += 1;
            }
        }
        expected.insert(*g, yes as f64 / total as f64);
    }
    std::fs::write(tmp.path().join("judge.json"), serde_json::to_string(&judge).unwrap()).unwrap();
    let r = ok(
        tmp.path(),
        &[
            "evaluate",
            "--checkpoint",
            base.to_str().unwrap(),
            "--dataset",
            "horse.json",
            "--images",
            &images.to_string(),
            "--judge-fixtures",
            "judge.json",
        ],
    );
    let report = &r["report"];
    let keys = [
        (EvalGroup::Target, "acc_u"),
        (EvalGroup::CorefTrain, "acc_c_train"),
        (EvalGroup::CorefTest, "acc_c_test"),
        (EvalGroup::RetainTrain, "acc_r_train"),
        (EvalGroup::RetainTest, "acc_r_test"),
    ];
    for (g, key) in keys {
        let got = report[key].as_f64().unwrap();
        assert!((got - expected[&g]).abs() < 1e-12, "{key}: {got} vs {}", expected[&g]);
    }
    let log = std::fs::read_to_string(tmp.path().join(r["dir"].as_str().unwrap()).join("verdicts.jsonl")).unwrap();
    let prompts: usize = groups.values().map(Vec::len).sum();
    assert_eq!(log.lines().count(), prompts * images as usize);
}

#[test]
fn report_merges_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, ds) = toy_init(tmp.path());
    let (b, d) = (base.to_str().unwrap(), ds.to_str().unwrap());
    let before = ok(tmp.path(), &["--preset", "toy", "evaluate", "--checkpoint", b, "--dataset", d, "--images", "4"]);
    let trained = ok(tmp.path(), &["--preset", "toy", "train", "--base", b, "--iterations", "30"]);
    let after = ok(
        tmp.path(),
        &["--preset", "toy", "evaluate", "--checkpoint", trained["dir"].as_str().unwrap(), "--images", "4"],
    );
    let r = ok(
        tmp.path(),
        &[
            "report",
            before["dir"].as_str().unwrap(),
            after["dir"].as_str().unwrap(),
            "--labels",
            "SD",
            "CRCE",
        ],
    );
    let dir = tmp.path().join(r["dir"].as_str().unwrap());
    let md = std::fs::read_to_string(dir.join("comparison.md")).unwrap();
    assert!(md.contains("| SD |") && md.contains("| CRCE |"), "{md}");
    assert_eq!(std::fs::read_to_string(dir.join("comparison.csv")).unwrap().lines().count(), 3);
    assert_eq!(crce(tmp.path(), &["report", "x", "--labels", "a", "b"]).code, 2);
}
