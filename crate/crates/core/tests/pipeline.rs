use std::path::{Path, PathBuf};

use sidebranch_core::moo::MooError;
use sidebranch_core::pipeline::{cmd_attack, cmd_profile, cmd_report, cmd_search, cmd_train, ExperimentSpec, LoadedSpec, PipelineError, RunDir};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny/experiment.toml")
}

fn load() -> LoadedSpec {
    LoadedSpec::load(&fixture(), None).unwrap()
}

fn full_run(root: &Path) -> Vec<u8> {
    let loaded = load();
    let mut run = RunDir::open(root, &loaded).unwrap();
    cmd_profile(&loaded, &mut run).unwrap();
    cmd_search(&loaded, &mut run, false, None).unwrap();
    cmd_train(&loaded, &mut run).unwrap();
    cmd_attack(&loaded, &mut run).unwrap();
    cmd_report(&mut run).unwrap();
    std::fs::read(root.join("report/summary.json")).unwrap()
}

#[test]
fn two_runs_give_identical_summaries_and_report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = full_run(&dir.path().join("a"));
    let b = full_run(&dir.path().join("b"));
    assert_eq!(a, b);

    let root = dir.path().join("a");
    let text = std::fs::read(root.join("report/summary.txt")).unwrap();
    let mut run = RunDir::open_existing(&root).unwrap();
    let again = cmd_report(&mut run).unwrap();
    assert_eq!(std::fs::read(root.join("report/summary.json")).unwrap(), a);
    assert_eq!(std::fs::read(root.join("report/summary.txt")).unwrap(), text);

    // the summary cites every artifact with its manifest digest
    let manifest = RunDir::open_existing(&root).unwrap().manifest;
    for stage in ["profile", "search", "train", "attack"] {
        for (path, digest) in &manifest.stages[stage].artifacts {
            assert_eq!(again.artifacts.get(path), Some(digest), "{path}");
        }
    }
    assert_eq!(again.search.alpha, 0.5);
    assert_eq!(again.search.h_limit_bytes, 6000);
    assert_eq!(again.search.infeasible_evaluated, 0);
    assert!(again.flags.latency_lower_bound);
    let tolerance_holds = again.train.victim_combined_accuracy >= again.train.control_combined_accuracy - 0.03;
    assert_eq!(again.flags.combined_accuracy_tolerance, tolerance_holds);
    assert!(again.train.bookkeeping_residual < 1e-9);
}

#[test]
fn paused_search_resumes_to_the_uninterrupted_result() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = load();
    let mut whole = RunDir::open(&dir.path().join("whole"), &loaded).unwrap();
    cmd_search(&loaded, &mut whole, false, None).unwrap();

    let mut split = RunDir::open(&dir.path().join("split"), &loaded).unwrap();
    let paused = cmd_search(&loaded, &mut split, false, Some(5));
    assert!(matches!(paused, Err(PipelineError::Search(MooError::Paused { evaluations: 5 }))), "{:?}", paused.err());
    assert!(split.require("search").is_err());
    cmd_search(&loaded, &mut split, true, None).unwrap();

    for f in ["search/search_log.jsonl", "search/front.csv", "search/selected.toml", "search/summary.json", "fixtures/public.ckpt"] {
        assert_eq!(std::fs::read(whole.path(f)).unwrap(), std::fs::read(split.path(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_and_tampered_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = load();
    let root = dir.path().join("r");
    let mut run = RunDir::open(&root, &loaded).unwrap();
    cmd_profile(&loaded, &mut run).unwrap();

    match cmd_report(&mut RunDir::open_existing(&root).unwrap()) {
        Err(PipelineError::Incomplete(missing)) => assert_eq!(missing, vec!["search", "train", "attack"]),
        other => panic!("expected incomplete run, got {:?}", other.err()),
    }
    let err = cmd_attack(&loaded, &mut run).unwrap_err();
    assert_eq!(err.exit_code(), 6, "{err}");

    cmd_search(&loaded, &mut run, false, None).unwrap();
    std::fs::write(run.path("search/selected.toml"), "version = 1\n").unwrap();
    assert!(matches!(cmd_train(&loaded, &mut run), Err(PipelineError::Digest { .. })));
}

#[test]
fn spec_errors_and_infeasible_search_have_distinct_exit_codes() {
    let text = std::fs::read_to_string(fixture()).unwrap();
    let bad = text.replace("seed = 11", "seed = 11\nturbo = true");
    assert!(ExperimentSpec::from_toml(&bad).is_err());
    let wrong_version = text.replace("version = 1", "version = 7");
    assert!(ExperimentSpec::from_toml(&wrong_version).is_err());

    let dir = tempfile::tempdir().unwrap();
    for f in ["ranges.toml", "profile.toml"] {
        std::fs::copy(fixture().with_file_name(f), dir.path().join(f)).unwrap();
    }
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let err = LoadedSpec::load(&dir.path().join("bad.toml"), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    std::fs::write(dir.path().join("tight.toml"), text.replace("h_limit_bytes = 6000", "h_limit_bytes = 16")).unwrap();
    let loaded = LoadedSpec::load(&dir.path().join("tight.toml"), None).unwrap();
    let mut run = RunDir::open(&dir.path().join("out"), &loaded).unwrap();
    let err = cmd_search(&loaded, &mut run, false, None).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn seed_override_changes_inputs_and_run_dirs_refuse_foreign_manifests() {
    let a = load();
    let b = LoadedSpec::load(&fixture(), Some(99)).unwrap();
    assert_eq!(b.spec.seed, 99);
    assert_ne!(a.inputs, b.inputs);
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunDir::open(dir.path(), &a).unwrap();
    cmd_profile(&a, &mut run).unwrap();
    assert!(RunDir::open(dir.path(), &b).is_err());
}
