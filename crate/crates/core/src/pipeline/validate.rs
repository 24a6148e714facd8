use std::collections::{BTreeMap, BTreeSet};

use super::{read_jsonl, PipelineConfig, ToolMode};
use crate::model::{QAExample, TaskKind};
use crate::tools::{Fixtures, Flow, PromptTemplate, TemplateKind};

/// Problems that would make a run fail or produce wrong data. Empty when
/// the config is usable.
pub fn validate(cfg: &PipelineConfig) -> Vec<String> {
    let mut out = Vec::new();
    let examples = load_examples(cfg, &mut out);
    check_templates(cfg, &mut out);
    let fixtures = check_fixtures(cfg, &mut out);
    if let Some(examples) = &examples {
        check_flow(cfg, examples, fixtures.as_ref(), &mut out);
        check_folds(cfg, examples, &mut out);
    }
    if cfg.tools.mode == ToolMode::Remote {
        check_remote(cfg, &mut out);
    }
    out
}

fn load_examples(cfg: &PipelineConfig, out: &mut Vec<String>) -> Option<Vec<QAExample>> {
    if !cfg.examples.exists() {
        out.push(format!("examples file {} does not exist", cfg.examples.display()));
        return None;
    }
    let examples: Vec<QAExample> = match read_jsonl(&cfg.examples) {
        Ok(e) => e,
        Err(e) => {
            out.push(e.to_string());
            return None;
        }
    };
    if examples.is_empty() {
        out.push(format!("examples file {} is empty", cfg.examples.display()));
    }
    let mut seen = BTreeSet::new();
    for ex in &examples {
        if let Err(e) = ex.validate() {
            out.push(e.to_string());
        }
        if !seen.insert(ex.example_id.as_str()) {
            out.push(format!("duplicate example id {}", ex.example_id));
        }
        if ex.example_id.contains("#c") {
            out.push(format!("example id {} uses the reserved crop suffix", ex.example_id));
        }
    }
    Some(examples)
}

fn check_templates(cfg: &PipelineConfig, out: &mut Vec<String>) {
    let wanted = [
        (&cfg.templates.summarizer, TemplateKind::Summarizer),
        (&cfg.templates.programmer, TemplateKind::Programmer),
    ];
    for (path, kind) in wanted {
        if !path.exists() {
            out.push(format!("template {} does not exist", path.display()));
            continue;
        }
        match PromptTemplate::load(path) {
            Ok(t) if t.kind != kind => {
                out.push(format!("template {} is a {:?} template, expected {kind:?}", path.display(), t.kind))
            }
            Ok(t) => out.extend(t.shot_count_problem()),
            Err(e) => out.push(e.to_string()),
        }
    }
}

fn check_fixtures(cfg: &PipelineConfig, out: &mut Vec<String>) -> Option<Fixtures> {
    if cfg.tools.mode != ToolMode::Mock {
        return None;
    }
    match &cfg.tools.fixtures {
        None => Some(Fixtures::default()),
        Some(path) if !path.exists() => {
            out.push(format!("fixtures file {} does not exist", path.display()));
            None
        }
        Some(path) => match Fixtures::load(path) {
            Ok(f) => Some(f),
            Err(e) => {
                out.push(e.to_string());
                None
            }
        },
    }
}

fn check_flow(cfg: &PipelineConfig, examples: &[QAExample], fixtures: Option<&Fixtures>, out: &mut Vec<String>) {
    let plot_to_table = match cfg.tools.mode {
        ToolMode::Mock => fixtures.is_some_and(|f| !f.tables.is_empty()),
        ToolMode::Remote => cfg.tools.endpoints.plot_to_table.is_some(),
    };
    for ex in examples {
        match (cfg.flow, &ex.structured_table) {
            (Flow::TableProgram, None) if !plot_to_table => out.push(format!(
                "{}: table-program flow but no structured_table and no plot-to-table tool",
                ex.example_id
            )),
            (Flow::TableProgram, None) if fixtures.is_some_and(|f| !f.tables.contains_key(&ex.image.id)) => {
                out.push(format!("{}: no plot-to-table fixture for image {}", ex.example_id, ex.image.id))
            }
            (Flow::TextEvidence, Some(_)) => out.push(format!(
                "{}: has a structured_table but the flow is text-evidence",
                ex.example_id
            )),
            _ => {}
        }
    }
}

fn check_folds(cfg: &PipelineConfig, examples: &[QAExample], out: &mut Vec<String>) {
    let wants_apr = cfg.task_kinds().is_ok_and(|k| k.contains(&TaskKind::Apr));
    if !wants_apr {
        return;
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in examples {
        *sizes.entry(ex.subset_name()).or_default() += 1;
    }
    for (subset, n) in &sizes {
        if *n < cfg.folds_per_subset {
            out.push(format!(
                "subset {subset:?} has {n} examples, fewer than {} folds",
                cfg.folds_per_subset
            ));
        }
    }
    if cfg.tools.mode == ToolMode::Remote {
        let folds = sizes.len() * cfg.folds_per_subset;
        let n = cfg.tools.endpoints.students.len();
        if n != folds {
            out.push(format!("{folds} folds need {folds} student endpoints, {n} configured"));
        }
    }
}

fn check_remote(cfg: &PipelineConfig, out: &mut Vec<String>) {
    let e = &cfg.tools.endpoints;
    let mut needed = vec![("ocr", &e.ocr), ("verifier", &e.verifier)];
    needed.push(match cfg.flow {
        Flow::TextEvidence => ("summarizer", &e.summarizer),
        Flow::TableProgram => ("programmer", &e.programmer),
    });
    for (tool, url) in needed {
        if url.is_none() {
            out.push(format!("remote mode but no {tool} endpoint"));
        }
    }
    if let Some(var) = &cfg.tools.api_key_env {
        if std::env::var_os(var).is_none() {
            out.push(format!("environment variable {var} is not set"));
        }
    }
}
