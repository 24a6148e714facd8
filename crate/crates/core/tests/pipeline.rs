mod common;

use std::collections::BTreeMap;
use std::fs;

use common::{snapshot, staged};
use rd_core::filter::{Category, CategorizedExample};
use rd_core::model::{RationaleRecord, TaskRecord};
use rd_core::pipeline::{
    partial_path, read_jsonl, run, sha256_hex, validate, PipelineError, Stage, StageStatus, BALANCED_FILE,
    CATEGORIZED_FILE, CROPS_FILE, RATIONALES_FILE, TASKS_DIR,
};
use rd_core::tasks::record_answer;
use rd_core::{parse_record, QAExample, TaskKind};

#[test]
fn synthetic_run_produces_every_task_file() {
    let (_dir, cfg) = staged("synthetic");
    let report = run(&cfg, &Stage::ALL).unwrap();
    assert!(report.stages.iter().all(|(_, s)| matches!(s, StageStatus::Ran { .. })));
    for kind in TaskKind::ALL {
        let path = cfg.output_dir.join(TASKS_DIR).join(format!("{}.jsonl", kind.slug()));
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.is_empty(), "{kind} is empty");
        for (i, line) in text.lines().enumerate() {
            let record = parse_record(line, i + 1).unwrap();
            assert_eq!(record.task, kind);
            record_answer(&record).unwrap();
        }
    }
    let crops: Vec<QAExample> = read_jsonl(&cfg.output_dir.join(CROPS_FILE)).unwrap();
    assert_eq!(crops.len(), 60);
    let rationales: Vec<RationaleRecord> = read_jsonl(&cfg.output_dir.join(RATIONALES_FILE)).unwrap();
    assert_eq!(rationales.len(), 80);
    let categorized: Vec<CategorizedExample> = read_jsonl(&cfg.output_dir.join(CATEGORIZED_FILE)).unwrap();
    for cat in [Category::Irrelevant, Category::RelevantNotUseful, Category::Useful] {
        assert!(categorized.iter().any(|c| c.category == cat), "no {cat:?} crops");
    }
}

#[test]
fn rerun_skips_everything() {
    let (_dir, cfg) = staged("synthetic");
    run(&cfg, &Stage::ALL).unwrap();
    let report = run(&cfg, &Stage::ALL).unwrap();
    assert!(report.stages.iter().all(|(_, s)| *s == StageStatus::Skipped));
}

#[test]
fn two_runs_are_byte_identical() {
    let (_a, cfg_a) = staged("synthetic");
    let (_b, mut cfg_b) = staged("synthetic");
    cfg_b.concurrency = 1;
    run(&cfg_a, &Stage::ALL).unwrap();
    run(&cfg_b, &Stage::ALL).unwrap();
    assert_eq!(snapshot(&cfg_a.output_dir), snapshot(&cfg_b.output_dir));
}

#[test]
fn deleting_a_stage_output_reproduces_it() {
    let (_dir, cfg) = staged("synthetic");
    run(&cfg, &Stage::ALL).unwrap();
    let before = snapshot(&cfg.output_dir);
    for (victim, rerun) in [
        (CROPS_FILE, Stage::Crop),
        (RATIONALES_FILE, Stage::Rationales),
        (CATEGORIZED_FILE, Stage::Filter),
        (BALANCED_FILE, Stage::Balance),
        ("tasks/qraci.jsonl", Stage::Tasks),
    ] {
        fs::remove_file(cfg.output_dir.join(victim)).unwrap();
        let report = run(&cfg, &Stage::ALL).unwrap();
        for (stage, status) in report.stages {
            let expect_run = stage == rerun;
            assert_eq!(matches!(status, StageStatus::Ran { .. }), expect_run, "{victim}: {stage:?}");
        }
        assert_eq!(snapshot(&cfg.output_dir), before, "after deleting {victim}");
    }
}

#[test]
fn seed_changes_balance_only_downstream() {
    let (_dir, mut cfg) = staged("synthetic");
    run(&cfg, &Stage::ALL).unwrap();
    cfg.seed += 1;
    let report = run(&cfg, &Stage::ALL).unwrap();
    let ran: Vec<Stage> = report
        .stages
        .iter()
        .filter(|(_, s)| matches!(s, StageStatus::Ran { .. }))
        .map(|(st, _)| *st)
        .collect();
    assert_eq!(ran, vec![Stage::Balance, Stage::Tasks]);
}

#[test]
fn verifier_down_fails_filter_and_keeps_crops() {
    let (dir, cfg) = staged("synthetic");
    run(&cfg, &[Stage::Crop, Stage::Rationales]).unwrap();
    let crops_before = fs::read(cfg.output_dir.join(CROPS_FILE)).unwrap();

    let fixtures = dir.path().join("fixtures.json");
    let mut fx: serde_json::Value = serde_json::from_str(&fs::read_to_string(&fixtures).unwrap()).unwrap();
    fx["down"] = serde_json::json!(["verifier"]);
    fs::write(&fixtures, serde_json::to_string_pretty(&fx).unwrap()).unwrap();

    let err = run(&cfg, &Stage::ALL).unwrap_err();
    match &err {
        PipelineError::StageFailure { stage, cause } => {
            assert_eq!(stage, "filter");
            assert!(cause.contains("verifier"), "{cause}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(err.exit_code(), 1);
    assert_eq!(fs::read(cfg.output_dir.join(CROPS_FILE)).unwrap(), crops_before);
    let categorized = cfg.output_dir.join(CATEGORIZED_FILE);
    assert!(!categorized.exists());
    assert!(partial_path(&categorized).exists());
}

#[test]
fn missing_input_is_a_stage_failure() {
    let (_dir, cfg) = staged("synthetic");
    let err = run(&cfg, &[Stage::Filter]).unwrap_err();
    assert!(matches!(err, PipelineError::StageFailure { ref stage, .. } if stage == "filter"));
}

#[test]
fn chart_run_flags_invalid_programs() {
    let (_dir, cfg) = staged("chart");
    assert_eq!(validate(&cfg), Vec::<String>::new());
    run(&cfg, &Stage::ALL).unwrap();
    let rationales: Vec<RationaleRecord> = read_jsonl(&cfg.output_dir.join(RATIONALES_FILE)).unwrap();
    let flagged: Vec<&str> = rationales
        .iter()
        .filter(|r| r.is_flagged())
        .map(|r| r.example_id.as_str())
        .collect();
    assert_eq!(flagged, vec!["chart07"]);
    // chart02 needed three attempts
    let chart02 = rationales.iter().find(|r| r.example_id == "chart02").unwrap();
    assert!(chart02.rationale.to_text().ends_with("<program> Greater(58, 37)"));

    let qra: Vec<TaskRecord> = read_jsonl(&cfg.output_dir.join("tasks/qra.jsonl")).unwrap();
    assert_eq!(qra.len(), 11);
    assert!(qra.iter().all(|r| r.example_id != "chart07" && r.decoder_output.contains("<program>")));
    let apr: Vec<TaskRecord> = read_jsonl(&cfg.output_dir.join("tasks/apr.jsonl")).unwrap();
    assert_eq!(apr.len(), 36);
    let folds: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg.output_dir.join("folds.json")).unwrap()).unwrap();
    assert_eq!(folds["fold_count"], 6);
}

#[test]
fn validate_reports_problems() {
    let (dir, cfg) = staged("synthetic");
    assert_eq!(validate(&cfg), Vec::<String>::new());

    let prog = dir.path().join("templates/programmer.toml");
    let text = fs::read_to_string(&prog).unwrap().replace("shot_count = 8", "shot_count = 5");
    fs::write(&prog, text).unwrap();
    let mut table_cfg = cfg.clone();
    table_cfg.flow = rd_core::tools::Flow::TableProgram;
    table_cfg.examples = dir.path().join("nope.jsonl");
    let problems = validate(&table_cfg);
    assert!(problems.iter().any(|p| p.contains("shot_count 5")), "{problems:?}");
    assert!(problems.iter().any(|p| p.contains("nope.jsonl")), "{problems:?}");

    let mut table_cfg = cfg.clone();
    table_cfg.flow = rd_core::tools::Flow::TableProgram;
    let problems = validate(&table_cfg);
    assert!(problems.iter().any(|p| p.contains("no structured_table and no plot-to-table")), "{problems:?}");
}

#[test]
fn validate_rejects_none_gold_answers() {
    let (dir, cfg) = staged("synthetic");
    let path = dir.path().join("examples.jsonl");
    let text = fs::read_to_string(&path).unwrap().replacen("\"gold_answers\":[\"", "\"gold_answers\":[\"None\",\"", 1);
    fs::write(&path, text).unwrap();
    let problems = validate(&cfg);
    assert_eq!(problems.len(), 1, "{problems:?}");
    assert!(problems[0].contains("None"));
}

/// Hashes of the task files produced from the bundled synthetic dataset.
/// Regenerate deliberately if the pipeline's output format changes.
#[test]
fn synthetic_golden_hashes() {
    let (_dir, cfg) = staged("synthetic");
    run(&cfg, &Stage::ALL).unwrap();
    let golden: BTreeMap<String, String> =
        serde_json::from_str(&fs::read_to_string(common::fixture_dir("synthetic").join("golden.json")).unwrap()).unwrap();
    let mut actual = BTreeMap::new();
    for (rel, bytes) in snapshot(&cfg.output_dir) {
        if rel.starts_with(TASKS_DIR) || rel.ends_with(".jsonl") {
            actual.insert(rel, sha256_hex(&bytes));
        }
    }
    if std::env::var_os("RDISTILL_BLESS").is_some() {
        let path = common::fixture_dir("synthetic").join("golden.json");
        fs::write(path, serde_json::to_string_pretty(&actual).unwrap() + "\n").unwrap();
        return;
    }
    assert_eq!(actual, golden);
}
