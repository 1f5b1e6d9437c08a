use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FORGE: &str = env!("CARGO_BIN_EXE_forge");

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn forge(args: &[&str]) -> Output {
    Command::new(FORGE)
        .args(args)
        .env_remove("FORGE_MOCK")
        .env_remove("FORGE_BACKEND_URL")
        .output()
        .expect("forge runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn log_records(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn mock_generate_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = forge(&["generate", "--text", "A basketball player", "--mock", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let outcome = stdout_json(&out);
    assert_eq!(outcome["status"], "accepted");
    let on_disk: Value = serde_json::from_slice(&fs::read(out_dir.join("outcome.json")).unwrap()).unwrap();
    assert_eq!(on_disk, outcome);
    assert!(out_dir.join("iter_1.snippet").is_file());
    assert!(out_dir.join("iter_1/portrait.png").is_file());
    assert!(out_dir.join("iter_1/full_body.png").is_file());
    assert!(out_dir.join("state.json").is_file());
    assert_eq!(log_records(&out_dir)[0]["step"], "create");

    let again = forge(&["generate", "--text", "x", "--mock", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr_json(&again)["error"].as_str().unwrap().contains("already holds"));
}

#[test]
fn ablation_flags_reach_the_logged_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = forge(&[
        "generate", "--text", "A basketball player", "--mock", "--no-cot", "--no-refine", "--tau", "0.8",
        "--max-iters", "3", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let config = &log_records(&out_dir)[0]["detail"]["config"];
    assert_eq!(config["cot_enabled"], false);
    assert_eq!(config["refine_enabled"], false);
    assert_eq!(config["tau"], 0.8);
    assert_eq!(config["max_iterations"], 3);
}

#[test]
fn scripted_low_score_without_refinement_exhausts() {
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("script.json");
    fs::write(&script, r#"[{"role": "evaluator", "iteration": 1, "completion": "SCORE: 50"}]"#).unwrap();
    let out_dir = tmp.path().join("run");
    let out = forge(&[
        "generate", "--text", "A basketball player", "--mock", "--no-refine", "--script", script.to_str().unwrap(),
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let outcome = stdout_json(&out);
    assert_eq!(outcome["status"], "exhausted_best_effort");
    assert_eq!(outcome["iterations"], 1);
    assert!(!out_dir.join("iter_2.snippet").exists());
}

#[test]
fn generate_errors_are_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let empty = forge(&["generate", "--mock", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(empty.status.code(), Some(1));
    assert!(stderr_json(&empty)["error"].is_string());

    let no_backend = forge(&["generate", "--text", "x", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(no_backend.status.code(), Some(1));
    assert!(stderr_json(&no_backend)["error"].as_str().unwrap().contains("backend"));

    let bad_tau = forge(&["generate", "--text", "x", "--mock", "--tau", "1.5", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(bad_tau.status.code(), Some(1));
    assert!(stderr_json(&bad_tau)["error"].as_str().unwrap().contains("1.5"));
}

#[test]
fn validate_sample_and_mutations() {
    let schema = core_fixture("reference_schema.json");
    let sample = core_fixture("appendix_sample.py");
    let ok = forge(&["validate", sample.to_str().unwrap(), "--schema", schema.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout_json(&ok), Value::Array(vec![]));

    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(&sample).unwrap();
    let hot = tmp.path().join("hot.py");
    fs::write(&hot, text.replace("= 0.55", "= 1.5")).unwrap();
    let bad = forge(&["validate", hot.to_str().unwrap(), "--schema", schema.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    let errors = stdout_json(&bad);
    assert_eq!(errors.as_array().unwrap().len(), 1);
    assert_eq!(errors[0]["code"], "DOMAIN_VIOLATION");

    let swapped = tmp.path().join("swapped.snippet");
    let body = text.replace("Hispanic/Tara.json", "Caucasian/Emma.json");
    fs::write(&swapped, format!("# region RENDER_SNIPPET\n{body}\n# endregion\n")).unwrap();
    let args = |extra: &[&str]| {
        let mut a = vec!["validate", swapped.to_str().unwrap(), "--schema", schema.to_str().unwrap()];
        a.extend_from_slice(extra);
        a.iter().map(|s| s.to_string()).collect::<Vec<_>>()
    };
    let run = |a: Vec<String>| forge(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(run(args(&[])).status.code(), Some(0));
    let refine = run(args(&["--context", "refine", "--prev", sample.to_str().unwrap()]));
    assert_eq!(refine.status.code(), Some(1));
    assert_eq!(stdout_json(&refine)[0]["code"], "PRESET_CHANGED");
    let unlocked = run(args(&["--context", "edit", "--prev", sample.to_str().unwrap(), "--preset-unlocked"]));
    assert_eq!(unlocked.status.code(), Some(0));
    let missing_prev = run(args(&["--context", "refine"]));
    assert_eq!(missing_prev.status.code(), Some(1));
    assert!(stderr_json(&missing_prev)["error"].as_str().unwrap().contains("--prev"));
}

#[test]
fn metrics_tables_and_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let gen = forge(&["generate", "--text", "A basketball player", "--mock", "--out", run_dir.to_str().unwrap()]);
    assert_eq!(gen.status.code(), Some(0));
    let manifest = tmp.path().join("m.jsonl");
    fs::write(
        &manifest,
        "{\"render\": \"run/iter_1/portrait.png\", \"ref_image\": \"run/iter_1/portrait.png\"}\n",
    )
    .unwrap();
    let table = tmp.path().join("table.csv");
    let out = forge(&["metrics", "--manifest", manifest.to_str().unwrap(), "--out", table.to_str().unwrap(), "--mock"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: Value = serde_json::from_slice(&fs::read(tmp.path().join("table.json")).unwrap()).unwrap();
    assert!((json["means"]["clip_image"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    let csv = fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("render,clip_text,clip_image,face_id,status"));

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = forge(&["metrics", "--manifest", empty.to_str().unwrap(), "--out", table.to_str().unwrap(), "--mock"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["rows"], 0);

    let no_providers = forge(&["metrics", "--manifest", empty.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert_eq!(no_providers.status.code(), Some(1));
}

#[test]
fn bank_grows_by_one_per_accepted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let bank = tmp.path().join("bank.jsonl");
    for (i, text) in ["A basketball player", "A woman with long blonde hair"].iter().enumerate() {
        let out_dir = tmp.path().join(format!("run{i}"));
        let out = forge(&[
            "generate", "--text", text, "--mock", "--bank", bank.to_str().unwrap(), "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        let list = forge(&["bank", "--file", bank.to_str().unwrap(), "list"]);
        assert_eq!(list.status.code(), Some(0));
        assert_eq!(String::from_utf8_lossy(&list.stdout).lines().count(), i + 1);
    }
    let prune = forge(&["bank", "--file", bank.to_str().unwrap(), "prune"]);
    assert_eq!(prune.status.code(), Some(0));
    let report = stdout_json(&prune);
    assert_eq!(report["kept"], 2);

    let missing = forge(&["bank", "--file", tmp.path().join("nope.jsonl").to_str().unwrap(), "list"]);
    assert_eq!(missing.status.code(), Some(1));
}
