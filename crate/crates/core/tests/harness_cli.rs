use std::fs;
use std::path::Path;
use std::process::Command;

use worldkit::harness::{
    emit_plots, read_records, replay, run_experiment, run_search, ExperimentConfig, HarnessError, RECORDS_FILE,
    SEARCH_RESULT_FILE, SUMMARY_FILE,
};

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json_str(text).unwrap()
}

fn tmaze(seed: u64, episodes: usize) -> ExperimentConfig {
    config(&format!(
        r#"{{"format_version": 1, "seed": {seed}, "environment": {{"name": "t_maze"}},
            "agent": {{"preference_strength": 3.0}}, "episodes": {episodes}}}"#
    ))
}

fn pool(seed: u64) -> ExperimentConfig {
    config(&format!(
        r#"{{"format_version": 1, "seed": {seed}, "environment": {{"name": "pool_table", "params": {{"steps": 40}}}},
            "agent": {{"fit_iterations": 2}}, "episodes": 3}}"#
    ))
}

fn run_with_threads(cfg: &ExperimentConfig, threads: usize, dir: &Path) {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| run_experiment(cfg, dir))
        .unwrap();
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn logs_do_not_depend_on_worker_count() {
    for cfg in [tmaze(11, 12), pool(5)] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_with_threads(&cfg, 1, a.path());
        run_with_threads(&cfg, 4, b.path());
        assert_eq!(read(a.path(), RECORDS_FILE), read(b.path(), RECORDS_FILE));
        assert_eq!(read(a.path(), SUMMARY_FILE), read(b.path(), SUMMARY_FILE));
    }
}

#[test]
fn seed_changes_the_log() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&pool(1), a.path()).unwrap();
    run_experiment(&pool(2), b.path()).unwrap();
    assert_ne!(read(a.path(), RECORDS_FILE), read(b.path(), RECORDS_FILE));
}

#[test]
fn truncated_log_names_last_valid_line() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tmaze(3, 4), dir.path()).unwrap();
    let path = dir.path().join(RECORDS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let cut = text.len() - 20;
    fs::write(&path, &text[..cut]).unwrap();
    let lines = text[..cut].matches('\n').count();
    match replay(dir.path()) {
        Err(HarnessError::CorruptLog { last_valid_line, .. }) => assert_eq!(last_valid_line, lines),
        other => panic!("expected a corrupt log, got {other:?}"),
    }
}

#[test]
fn edited_efe_is_reported_with_its_record() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tmaze(3, 4), dir.path()).unwrap();
    let path = dir.path().join(RECORDS_FILE);
    let mut lines: Vec<serde_json::Value> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let target = 4;
    let total = lines[target]["policies"][0]["total"].as_f64().unwrap();
    lines[target]["policies"][0]["total"] = serde_json::json!(total + 0.5);
    let body: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&path, body).unwrap();
    match replay(dir.path()) {
        Err(HarnessError::RecordMismatch { record, .. }) => assert_eq!(record, target),
        other => panic!("expected a record mismatch, got {other:?}"),
    }
}

#[test]
fn edited_summary_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tmaze(3, 2), dir.path()).unwrap();
    let path = dir.path().join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("\"episodes\": 2", "\"episodes\": 3");
    fs::write(&path, text).unwrap();
    assert!(matches!(replay(dir.path()), Err(HarnessError::SummaryMismatch)));
}

#[test]
fn plots_have_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tmaze(9, 6), dir.path()).unwrap();
    for path in emit_plots(dir.path()).unwrap() {
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 7);
    }
}

#[test]
fn timing_is_only_logged_on_request() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tmaze(1, 1), dir.path()).unwrap();
    assert!(read_records(dir.path()).unwrap().iter().all(|r| r.wall_clock.is_none()));
    let mut cfg = tmaze(1, 1);
    cfg.record_timing = true;
    run_experiment(&cfg, dir.path()).unwrap();
    assert!(read_records(dir.path()).unwrap().iter().all(|r| r.wall_clock.is_some()));
}

#[test]
fn records_cover_every_step() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&pool(4), dir.path()).unwrap();
    let records = read_records(dir.path()).unwrap();
    assert_eq!(records.len(), 3 * 41);
    assert!(records.iter().all(|r| r.free_energy.is_some_and(f64::is_finite)));
}

#[test]
fn continuous_search_writes_a_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"{"format_version": 1, "seed": 2, "environment": {"name": "pool_table", "params": {"steps": 30}},
            "episodes": 0, "search": {"move_budget": 1, "max_fits": 3, "fit_budget": 2, "data_episodes": 2}}"#,
    );
    let outcome = run_search(&cfg, dir.path()).unwrap();
    assert!(outcome.fits <= 3);
    assert!(dir.path().join(SEARCH_RESULT_FILE).exists());
}

fn cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_worldkit"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    fs::write(
        &good,
        r#"{"format_version": 1, "seed": 1, "environment": {"name": "t_maze"}, "episodes": 2}"#,
    )
    .unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"format_version": 1, "seed": 1, "environment": {"name": "maze"}}"#).unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["run", good.to_str().unwrap(), "--out", out]), 0);
    assert_eq!(cli(&["replay", out]), 0);
    assert_eq!(cli(&["plots", out]), 0);
    assert_eq!(cli(&["run", bad.to_str().unwrap(), "--out", out]), 2);
    fs::write(Path::new(out).join(RECORDS_FILE), "{not json\n").unwrap();
    assert_eq!(cli(&["replay", out]), 1);
}

#[test]
fn learning_lowers_free_energy() {
    let mut wins = 0;
    for seed in 0..20 {
        let cfg = config(&format!(
            r#"{{"format_version": 1, "seed": {seed}, "environment": {{"name": "t_maze"}},
                "agent": {{"preference_strength": 3.0, "learning_rate": 1.0}}, "episodes": 50}}"#
        ));
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&cfg, dir.path()).unwrap();
        let early: f64 = summary.mean_free_energy[..10].iter().sum();
        let late: f64 = summary.mean_free_energy[40..].iter().sum();
        wins += usize::from(late < early);
    }
    assert!(wins >= 18, "{wins}/20");
}

#[test]
fn flat_preferences_visit_the_cue_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(r#"{"format_version": 1, "seed": 4, "environment": {"name": "t_maze"}, "episodes": 1}"#);
    run_experiment(&cfg, dir.path()).unwrap();
    let first = &read_records(dir.path()).unwrap()[0];
    assert_eq!(first.action, Some(vec![worldkit::envs::tmaze::CUE]));
    let policies = first.policies.as_ref().unwrap();
    let best = policies.iter().map(|p| p.total).fold(f64::INFINITY, f64::min);
    for p in policies.iter().filter(|p| p.total <= best + 1e-12) {
        assert_eq!(p.actions[0], vec![worldkit::envs::tmaze::CUE]);
    }
}

#[test]
fn zero_episode_plots_are_header_only() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tmaze(1, 0), dir.path()).unwrap();
    for path in emit_plots(dir.path()).unwrap() {
        assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 1);
    }
}

#[test]
fn plot_values_match_replay() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tmaze(6, 5), dir.path()).unwrap();
    let summary = replay(dir.path()).unwrap();
    let paths = emit_plots(dir.path()).unwrap();
    let text = fs::read_to_string(&paths[0]).unwrap();
    for (e, line) in text.lines().skip(1).enumerate() {
        let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(value, summary.mean_free_energy[e]);
    }
}
