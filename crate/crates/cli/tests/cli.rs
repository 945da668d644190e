use std::path::Path;
use std::process::{Command, Output};

use collabmem::scenario::ScenarioConfig;

fn collabmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collabmem")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn gen_schedule_prints_boundaries_and_writes_a_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = collabmem(&["gen-schedule", "--users", "5", "--agents", "5", "--p", "0.2", "--seed", "9", "--phases", "5,10,15,20,25,20,15,10,5", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let edges: Vec<u64> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["edges"].as_u64().unwrap())
        .collect();
    assert_eq!(edges, [5, 10, 15, 20, 25, 20, 15, 10, 5]);
    assert!(dir.path().join("timeline.jsonl").exists());
    assert!(dir.path().join("boundaries.json").exists());

    let named = collabmem(&["gen-schedule", "--users", "ana,bo", "--agents", "x,y", "--phases", "1,4,2"]);
    assert!(named.status.success());
    assert_eq!(stdout(&named).lines().count(), 3);
    let impossible = collabmem(&["gen-schedule", "--users", "1", "--agents", "1", "--phases", "3"]);
    assert_eq!(impossible.status.code(), Some(2));
}

#[test]
fn preset_yaml_round_trips_and_unknown_presets_fail() {
    let o = collabmem(&["preset", "evolving-published", "--seed", "4"]);
    assert!(o.status.success());
    let cfg = ScenarioConfig::from_str_at(&stdout(&o), None).unwrap();
    assert_eq!(cfg, collabmem::presets::by_name("evolving-published", 4).unwrap());
    let bad = collabmem(&["preset", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown preset"));
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    collabmem(&args)
}

#[test]
fn run_writes_artifacts_that_verify_and_rerun_identically() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg_path = cfg_dir.path().join("scenario.yaml");
    std::fs::write(&cfg_path, collabmem::presets::evolving_schedule(6, 15).to_yaml()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let o = run_into(a.path(), &["--config", cfg_path.to_str().unwrap(), "--mode", "isolated", "--seed", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["mode"], "isolated");
    assert_eq!(summary["safety_violations"], 0);
    for f in ["audit.jsonl", "timeline.jsonl", "store.jsonl", "metrics.csv", "metrics.json", "access_matrices.json", "transcript.jsonl", "config.yaml"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    let p = |f: &str| a.path().join(f).to_str().unwrap().to_string();
    let v = collabmem(&["verify", "--audit", &p("audit.jsonl"), "--timeline", &p("timeline.jsonl"), "--store", &p("store.jsonl")]);
    assert_eq!(v.status.code(), Some(0));

    // The echoed config reproduces the run byte for byte.
    let b = tempfile::tempdir().unwrap();
    assert!(run_into(b.path(), &["--config", &p("config.yaml")]).status.success());
    for f in ["audit.jsonl", "metrics.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn verify_infers_principals_and_reports_unreadable_inputs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_into(dir.path(), &["--preset", "asymmetric-roles"]).status.success());
    std::fs::remove_file(dir.path().join("principals.json")).unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let v = collabmem(&["verify", "--audit", &p("audit.jsonl"), "--timeline", &p("timeline.jsonl"), "--store", &p("store.jsonl")]);
    assert_eq!(v.status.code(), Some(0), "{}", String::from_utf8_lossy(&v.stderr));
    let missing = collabmem(&["verify", "--audit", &p("nope.jsonl"), "--timeline", &p("timeline.jsonl"), "--store", &p("store.jsonl")]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn compare_reports_the_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let o = collabmem(&["compare", "--preset", "fully-collaborative", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.starts_with("bin,shared_calls,isolated_calls,reduction"));
    assert!(csv.lines().any(|l| l.starts_with("total,100,300,")), "{csv}");
    for f in ["comparison.json", "comparison.csv", "shared/metrics.csv", "isolated/metrics.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn config_source_is_required() {
    assert_eq!(collabmem(&["run", "--out", "/tmp/never"]).status.code(), Some(2));
}

#[test]
fn shipped_configs_match_presets_and_the_file_corpus_runs() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in collabmem::presets::NAMES {
        let cfg = ScenarioConfig::load(&configs.join(format!("{name}.yaml"))).unwrap();
        assert_eq!(cfg, collabmem::presets::by_name(name, 0).unwrap(), "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let config = configs.join("small-files.yaml");
    let o = collabmem(&["run", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["episodes"], 12);
    assert_eq!(summary["safety_violations"], 0);
}
