use std::fs;
use std::path::Path;
use std::process::Command;

use forge::config::ConfigError;
use forge::{demo, run_pipeline, PipelineConfig, PipelineError, RunOptions, Stage};

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    demo::write_fixture(dir.path()).unwrap();
    dir
}

fn config_with(dir: &Path, edit: impl FnOnce(String) -> String) -> PipelineConfig {
    let path = dir.join("forge.toml");
    fs::write(&path, edit(demo::DEMO_CONFIG.to_string())).unwrap();
    PipelineConfig::load(&path).unwrap()
}

fn errors(cfg: &PipelineConfig) -> Vec<String> {
    match cfg.validate() {
        Ok(()) => vec![],
        Err(ConfigError::Invalid(e)) => e,
        Err(e) => panic!("unexpected {e}"),
    }
}

#[test]
fn demo_config_is_valid() {
    let dir = fixture();
    let cfg = PipelineConfig::load(&dir.path().join("forge.toml")).unwrap();
    assert_eq!(errors(&cfg), Vec::<String>::new());
}

#[test]
fn l_above_k_is_rejected() {
    let dir = fixture();
    let cfg = config_with(dir.path(), |s| s.replace("l = 8", "l = 17"));
    let errs = errors(&cfg);
    assert_eq!(errs.len(), 1, "{errs:?}");
    assert!(errs[0].starts_with("curation.l"), "{errs:?}");
}

#[test]
fn missing_embeddings_path_names_the_field() {
    let dir = fixture();
    let cfg = config_with(dir.path(), |s| s.replace("embeddings = \"embeddings\"\n", ""));
    let errs = errors(&cfg);
    assert_eq!(errs, vec!["paths.embeddings: missing".to_string()]);
}

#[test]
fn every_problem_is_reported_at_once() {
    let dir = fixture();
    let cfg = config_with(dir.path(), |s| {
        s.replace("seed = 20240601", "")
            .replace("m = 4", "m = 0")
            .replace("n = 1", "n = 0")
            .replace("videos = \"videos\"", "videos = \"nowhere\"")
    });
    let errs = errors(&cfg);
    for field in ["seed", "paths.videos", "frames.m", "eval.n"] {
        assert!(errs.iter().any(|e| e.starts_with(field)), "{field} missing from {errs:?}");
    }
}

#[test]
fn unknown_keys_fail_to_parse() {
    let err = PipelineConfig::from_toml("seed = 1\n[curation]\nkk = 3\n", ".").unwrap_err();
    assert!(err.to_string().contains("kk"));
}

#[test]
fn hash_ignores_config_location() {
    let (a, b) = (fixture(), fixture());
    let ca = PipelineConfig::load(&a.path().join("forge.toml")).unwrap();
    let cb = PipelineConfig::load(&b.path().join("forge.toml")).unwrap();
    assert_eq!(ca.hash(), cb.hash());
    let other = config_with(b.path(), |s| s.replace("k = 16", "k = 15"));
    assert_ne!(ca.hash(), other.hash());
}

#[test]
fn invalid_config_stops_before_any_stage() {
    let dir = fixture();
    let cfg = config_with(dir.path(), |s| s.replace("l = 8", "l = 99"));
    let r = run_pipeline(&cfg, &RunOptions { jobs: 1, until: None, force: false });
    assert!(matches!(r, Err(PipelineError::Config(_))));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn rerun_skips_and_tampering_recomputes() {
    let dir = fixture();
    let cfg = PipelineConfig::load(&dir.path().join("forge.toml")).unwrap();
    let opts = RunOptions { jobs: 2, until: Some(Stage::Score), force: false };
    let first = run_pipeline(&cfg, &opts).unwrap();
    assert_eq!(first.stages.len(), 4);
    assert!(first.stages.iter().all(|s| !s.skipped));

    let again = run_pipeline(&cfg, &opts).unwrap();
    assert!(again.stages.iter().all(|s| s.skipped));
    assert_eq!(first.digests(), again.digests());

    // a damaged output reruns its stage and everything downstream is
    // skipped again once the rebuilt outputs match
    let pool = dir.path().join("out/score/pool.jsonl");
    fs::write(&pool, "garbage\n").unwrap();
    let healed = run_pipeline(&cfg, &opts).unwrap();
    assert!(!healed.stage("score").unwrap().skipped);
    assert!(healed.stage("edit").unwrap().skipped);
    assert_eq!(first.digests(), healed.digests());

    let forced = run_pipeline(&cfg, &RunOptions { force: true, ..opts }).unwrap();
    assert!(forced.stages.iter().all(|s| !s.skipped));
    assert_eq!(first.digests(), forced.digests());
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_forge");
    let dir = fixture();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, demo::DEMO_CONFIG.replace("l = 8", "l = 99")).unwrap();

    let ok = Command::new(bin).arg("validate").arg("--config").arg(dir.path().join("forge.toml")).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let invalid = Command::new(bin).arg("validate").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(invalid.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("curation.l"));

    let empty_pool = dir.path().join("pool.jsonl");
    fs::write(&empty_pool, "").unwrap();
    let failed = Command::new(bin)
        .args(["curate", "quant", "--k", "3", "--pool"])
        .arg(&empty_pool)
        .output()
        .unwrap();
    assert_eq!(failed.status.code(), Some(3));
}
