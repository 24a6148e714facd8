//! File-based stage orchestration.
//!
//! Stages run in order crop → generate-rationales → filter → balance →
//! build-tasks. Each writes its outputs under the output directory together
//! with `manifests/<stage>.json` (input hashes, config hash, output hashes);
//! a stage whose manifest still matches is skipped. A failing stage leaves
//! whatever it finished in `<output>.partial`.

mod config;
mod store;
mod validate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::codec::TokenCounter;
use crate::crop::{apply_plan, plan_crops};
use crate::eval::{evaluate, vote, vote_with_calculator, EvalError, GoldRecord, HypothesisRecord, Metric, MetricReport, PredictionRecord};
use crate::filter::{balance, categorize, CategorizedExample};
use crate::model::{QAExample, Rationale, RationaleRecord, ScoredHypothesis, TaskKind, TaskRecord, NONE_ANSWER};
use crate::tasks::{
    build_ans_only, build_apr, build_apraci, build_qid, build_qra, build_qraci, plan_folds, subsets_of,
};
use crate::tools::{
    generate_rationale, remote_students, Fixtures, GenerateOptions, HttpClient, MockStudent, PromptTemplate,
    StudentRationaleClient, Templates, ToolError, ToolSet, UreqTransport,
};

pub use config::{FilterSection, PipelineConfig, TemplatePaths, ToolMode, ToolsConfig};
pub use store::{
    io_err, json_bytes, jsonl_bytes, partial_path, read_jsonl, sha256_file, sha256_hex, write_atomic, write_partial,
    FileDigest, StageManifest,
};
pub use validate::validate;

pub const CROPS_FILE: &str = "crops.jsonl";
pub const RATIONALES_FILE: &str = "rationales.jsonl";
pub const CATEGORIZED_FILE: &str = "categorized.jsonl";
pub const BALANCED_FILE: &str = "balanced.jsonl";
pub const BALANCE_REPORT_FILE: &str = "balance_report.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const TASKS_DIR: &str = "tasks";
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("stage {stage} failed: {cause}")]
    StageFailure { stage: String, cause: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// 2 for configuration and validation problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Crop,
    Rationales,
    Filter,
    Balance,
    Tasks,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Crop, Stage::Rationales, Stage::Filter, Stage::Balance, Stage::Tasks];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Crop => "crop",
            Stage::Rationales => "generate-rationales",
            Stage::Filter => "filter",
            Stage::Balance => "balance",
            Stage::Tasks => "build-tasks",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran { records: usize },
    Skipped,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub stages: Vec<(Stage, StageStatus)>,
}

struct Output {
    rel: String,
    bytes: Vec<u8>,
    records: Option<usize>,
}

impl Output {
    fn jsonl<T: Serialize>(rel: impl Into<String>, records: &[T]) -> Self {
        Output {
            rel: rel.into(),
            bytes: jsonl_bytes(records),
            records: Some(records.len()),
        }
    }

    fn json<T: Serialize>(rel: impl Into<String>, value: &T) -> Self {
        Output {
            rel: rel.into(),
            bytes: json_bytes(value),
            records: None,
        }
    }
}

/// Why a stage body stopped, and what it had finished.
struct Failure {
    cause: String,
    partial: Vec<Output>,
}

impl Failure {
    fn new(cause: impl ToString) -> Self {
        Failure {
            cause: cause.to_string(),
            partial: Vec::new(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::new(e)
    }
}

/// Splits per-item results; the cause names the first failure in input order.
fn settle<T>(results: Vec<Result<T, String>>) -> (Vec<T>, Option<String>) {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(e),
        }
    }
    let cause = (!errors.is_empty()).then(|| format!("{} of {total} items failed; first: {}", errors.len(), errors[0]));
    (ok, cause)
}

/// Executes stages for one config.
pub struct Runner<'a> {
    cfg: &'a PipelineConfig,
    counter: Box<dyn TokenCounter>,
    pool: rayon::ThreadPool,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Result<Self, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.concurrency.max(1))
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Runner {
            cfg,
            counter: cfg.counter.build(),
            pool,
        })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out(MANIFEST_DIR).join(format!("{}.json", stage.name()))
    }

    fn fixture_inputs(&self) -> Vec<PathBuf> {
        match (self.cfg.tools.mode, &self.cfg.tools.fixtures) {
            (ToolMode::Mock, Some(p)) => vec![p.clone()],
            _ => vec![],
        }
    }

    fn tool_config(&self) -> Value {
        let t = &self.cfg.tools;
        json!({ "mode": t.mode, "endpoints": t.endpoints, "programmer_temperature": t.programmer_temperature })
    }

    fn examples(&self) -> Result<Vec<QAExample>, Failure> {
        let examples: Vec<QAExample> = read_jsonl(&self.cfg.examples)?;
        for ex in &examples {
            ex.validate().map_err(Failure::new)?;
        }
        Ok(examples)
    }

    fn fixtures(&self, examples: &[QAExample]) -> Result<Arc<Fixtures>, Failure> {
        let base = match &self.cfg.tools.fixtures {
            Some(path) => Fixtures::load(path).map_err(Failure::new)?,
            None => Fixtures::default(),
        };
        Ok(Arc::new(base.with_example_ocr(examples).with_example_answers(examples)))
    }

    fn http(&self) -> Result<Arc<HttpClient>, Failure> {
        let t = &self.cfg.tools;
        let mut client = HttpClient::new(Box::new(UreqTransport), t.retry, self.cfg.concurrency);
        if let Some(var) = &t.api_key_env {
            let token = std::env::var(var).map_err(|_| Failure::new(format!("environment variable {var} is not set")))?;
            client = client.with_bearer(&token);
        }
        Ok(Arc::new(client))
    }

    fn tools(&self, examples: &[QAExample]) -> Result<ToolSet, Failure> {
        match self.cfg.tools.mode {
            ToolMode::Mock => Ok(ToolSet::mock(self.fixtures(examples)?)),
            ToolMode::Remote => Ok(ToolSet::remote(
                &self.cfg.tools.endpoints,
                self.http()?,
                self.cfg.tools.programmer_temperature,
            )),
        }
    }

    fn students(&self, examples: &[QAExample], folds: usize) -> Result<Vec<Box<dyn StudentRationaleClient>>, Failure> {
        match self.cfg.tools.mode {
            ToolMode::Mock => Ok(MockStudent::per_fold(self.fixtures(examples)?, folds)
                .into_iter()
                .map(|s| Box::new(s) as Box<dyn StudentRationaleClient>)
                .collect()),
            ToolMode::Remote => {
                let n = self.cfg.tools.endpoints.students.len();
                if n != folds {
                    return Err(Failure::new(format!("{folds} folds need {folds} student endpoints, {n} configured")));
                }
                Ok(remote_students(&self.cfg.tools.endpoints, self.http()?)
                    .into_iter()
                    .map(|s| Box::new(s) as Box<dyn StudentRationaleClient>)
                    .collect())
            }
        }
    }

    fn templates(&self) -> Result<Templates, Failure> {
        Ok(Templates {
            summarizer: PromptTemplate::load(&self.cfg.templates.summarizer).map_err(Failure::new)?,
            programmer: PromptTemplate::load(&self.cfg.templates.programmer).map_err(Failure::new)?,
        })
    }

    /// Runs one stage unless its manifest shows it is up to date.
    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus, PipelineError> {
        let cfg = self.cfg;
        let (mut inputs, config) = match stage {
            Stage::Crop => (vec![cfg.examples.clone()], json!({ "crop_mode": cfg.crop_mode })),
            Stage::Rationales => (
                vec![
                    cfg.examples.clone(),
                    self.out(CROPS_FILE),
                    cfg.templates.summarizer.clone(),
                    cfg.templates.programmer.clone(),
                ],
                json!({
                    "flow": cfg.flow,
                    "counter": cfg.counter,
                    "program_attempts": cfg.tools.program_attempts,
                    "tools": self.tool_config(),
                }),
            ),
            Stage::Filter => (
                vec![cfg.examples.clone(), self.out(CROPS_FILE), self.out(RATIONALES_FILE)],
                json!({ "filter": cfg.filter, "tools": self.tool_config() }),
            ),
            Stage::Balance => (vec![self.out(CATEGORIZED_FILE)], json!({ "seed": cfg.seed })),
            Stage::Tasks => (
                vec![cfg.examples.clone(), self.out(RATIONALES_FILE), self.out(BALANCED_FILE)],
                json!({
                    "tasks": cfg.task_kinds()?,
                    "counter": cfg.counter,
                    "seed": cfg.seed,
                    "folds_per_subset": cfg.folds_per_subset,
                    "student_samples": cfg.student_samples,
                    "tools": self.tool_config(),
                }),
            ),
        };
        if stage != Stage::Crop && stage != Stage::Balance {
            inputs.extend(self.fixture_inputs());
        }
        self.execute(stage, &inputs, &config, |r| match stage {
            Stage::Crop => r.crop(),
            Stage::Rationales => r.rationales(),
            Stage::Filter => r.filter(),
            Stage::Balance => r.balance(),
            Stage::Tasks => r.tasks(),
        })
    }

    fn execute(
        &self,
        stage: Stage,
        inputs: &[PathBuf],
        config: &Value,
        body: impl FnOnce(&Self) -> Result<Vec<Output>, Failure>,
    ) -> Result<StageStatus, PipelineError> {
        let fail = |cause: String| PipelineError::StageFailure {
            stage: stage.name().to_string(),
            cause,
        };
        let mut digests = Vec::with_capacity(inputs.len());
        for path in inputs {
            if !path.exists() {
                return Err(fail(format!("missing input {}", path.display())));
            }
            digests.push(FileDigest::of(path)?);
        }
        let config_sha256 = sha256_hex(&serde_json::to_vec(config).expect("config serializes"));
        let manifest_path = self.manifest_path(stage);
        if let Some(m) = StageManifest::load(&manifest_path) {
            if m.inputs == digests && m.config_sha256 == config_sha256 && m.outputs_intact(&self.cfg.output_dir) {
                log::info!("{}: up to date, skipping", stage.name());
                return Ok(StageStatus::Skipped);
            }
        }
        if manifest_path.exists() {
            fs::remove_file(&manifest_path).map_err(io_err(&manifest_path))?;
        }

        log::info!("{}: running", stage.name());
        let outputs = match body(self) {
            Ok(outputs) => outputs,
            Err(f) => {
                for o in &f.partial {
                    write_partial(&self.out(&o.rel), &o.bytes)?;
                }
                return Err(fail(f.cause));
            }
        };
        let mut records = 0;
        let mut written = Vec::with_capacity(outputs.len());
        for o in &outputs {
            let path = self.out(&o.rel);
            write_atomic(&path, &o.bytes)?;
            records += o.records.unwrap_or(0);
            written.push(FileDigest {
                path: o.rel.clone(),
                sha256: sha256_hex(&o.bytes),
                records: o.records,
            });
        }
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            inputs: digests,
            config_sha256,
            outputs: written,
        };
        write_atomic(&manifest_path, &json_bytes(&manifest))?;
        log::info!("{}: wrote {records} records", stage.name());
        Ok(StageStatus::Ran { records })
    }

    fn crop(&self) -> Result<Vec<Output>, Failure> {
        let examples = self.examples()?;
        let mode = self.cfg.crop_mode;
        let results: Vec<Result<Vec<QAExample>, String>> = self.pool.install(|| {
            examples
                .par_iter()
                .map(|ex| {
                    let plan = plan_crops(ex.image.height.into(), ex.image.width.into(), mode)
                        .map_err(|e| format!("{}: {e}", ex.example_id))?;
                    apply_plan(ex, &plan).map_err(|e| format!("{}: {e}", ex.example_id))
                })
                .collect()
        });
        let (ok, cause) = settle(results);
        let mut crops: Vec<QAExample> = ok.into_iter().flatten().collect();
        crops.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        let out = vec![Output::jsonl(CROPS_FILE, &crops)];
        match cause {
            Some(cause) => Err(Failure { cause, partial: out }),
            None => Ok(out),
        }
    }

    fn rationales(&self) -> Result<Vec<Output>, Failure> {
        let examples = self.examples()?;
        let crops: Vec<QAExample> = read_jsonl(&self.out(CROPS_FILE))?;
        let tools = self.tools(&examples)?;
        let templates = self.templates()?;
        let options = GenerateOptions {
            program_attempts: self.cfg.tools.program_attempts,
            ..GenerateOptions::default()
        };
        let flow = self.cfg.flow;
        let counter = self.counter.as_ref();
        let items: Vec<&QAExample> = examples.iter().chain(&crops).collect();
        let results: Vec<Result<RationaleRecord, String>> = self.pool.install(|| {
            items
                .par_iter()
                .map(|ex| match generate_rationale(ex, flow, &tools, &templates, &options, counter) {
                    Ok(rationale) => Ok(RationaleRecord {
                        example_id: ex.example_id.clone(),
                        rationale,
                        invalid_program: None,
                    }),
                    Err(ToolError::InvalidProgram { attempts, last, reason }) => {
                        log::warn!("{}: flagged, no valid program after {attempts} attempts", ex.example_id);
                        Ok(RationaleRecord {
                            example_id: ex.example_id.clone(),
                            rationale: Rationale::table_program(ex.structured_table.clone().unwrap_or_default(), last),
                            invalid_program: Some(format!("no valid program after {attempts} attempts: {reason}")),
                        })
                    }
                    Err(e) => Err(format!("{}: {e}", ex.example_id)),
                })
                .collect()
        });
        let (mut records, cause) = settle(results);
        records.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        let out = vec![Output::jsonl(RATIONALES_FILE, &records)];
        match cause {
            Some(cause) => Err(Failure { cause, partial: out }),
            None => Ok(out),
        }
    }

    fn filter(&self) -> Result<Vec<Output>, Failure> {
        let examples = self.examples()?;
        let crops: Vec<QAExample> = read_jsonl(&self.out(CROPS_FILE))?;
        let rationales = rationale_map(read_jsonl(&self.out(RATIONALES_FILE))?);
        let tools = self.tools(&examples)?;
        let fcfg = self.cfg.filter.filter_config();
        let mut items: Vec<&QAExample> = crops.iter().collect();
        if self.cfg.filter.whole_images {
            items.extend(&examples);
        }
        let verifier = tools.verifier.as_ref();
        let results: Vec<Result<Option<CategorizedExample>, String>> = self.pool.install(|| {
            items
                .par_iter()
                .map(|ex| {
                    let record = rationales
                        .get(&ex.example_id)
                        .ok_or_else(|| format!("{}: no rationale", ex.example_id))?;
                    if record.is_flagged() {
                        log::info!("{}: flagged rationale, not filtered", ex.example_id);
                        return Ok(None);
                    }
                    categorize(ex, &record.rationale, verifier, &fcfg)
                        .map(Some)
                        .map_err(|e| e.to_string())
                })
                .collect()
        });
        let (ok, cause) = settle(results);
        let mut categorized: Vec<CategorizedExample> = ok.into_iter().flatten().collect();
        categorized.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        let out = vec![Output::jsonl(CATEGORIZED_FILE, &categorized)];
        match cause {
            Some(cause) => Err(Failure { cause, partial: out }),
            None => Ok(out),
        }
    }

    fn balance(&self) -> Result<Vec<Output>, Failure> {
        let categorized: Vec<CategorizedExample> = read_jsonl(&self.out(CATEGORIZED_FILE))?;
        let (kept, report) = balance(categorized, self.cfg.seed);
        log::info!(
            "balance: kept {} of {} None crops ({} not useful, {} useful)",
            report.n_none_kept,
            report.n_none,
            report.n_bad_r,
            report.n_good_r
        );
        Ok(vec![Output::jsonl(BALANCED_FILE, &kept), Output::json(BALANCE_REPORT_FILE, &report)])
    }

    fn tasks(&self) -> Result<Vec<Output>, Failure> {
        let examples = self.examples()?;
        let rationales = rationale_map(read_jsonl(&self.out(RATIONALES_FILE))?);
        let balanced: Vec<CategorizedExample> = read_jsonl(&self.out(BALANCED_FILE))?;
        let counter = self.counter.as_ref();
        let mut out = Vec::new();
        for kind in self.cfg.task_kinds()? {
            let built = match kind {
                TaskKind::Qra => build_qra(&examples, &rationales, counter).map_err(|e| e.to_string()),
                TaskKind::Apr => self.apr(&examples, counter, &mut out),
                TaskKind::Qraci => build_qraci(&balanced, counter).map_err(|e| e.to_string()),
                TaskKind::Aprci => build_apraci(&balanced, counter).map_err(|e| e.to_string()),
                TaskKind::Qid => build_qid(&examples, counter).map_err(|e| e.to_string()),
                TaskKind::AnsOnly => build_ans_only(&examples, counter).map_err(|e| e.to_string()),
            };
            match built {
                Ok(mut records) => {
                    records.sort_by(|a: &TaskRecord, b| a.example_id.cmp(&b.example_id));
                    out.push(Output::jsonl(format!("{TASKS_DIR}/{}.jsonl", kind.slug()), &records));
                }
                Err(e) => {
                    return Err(Failure {
                        cause: format!("{}: {e}", kind.slug()),
                        partial: out,
                    })
                }
            }
        }
        Ok(out)
    }
}

impl Runner<'_> {
    fn apr(&self, examples: &[QAExample], counter: &dyn TokenCounter, out: &mut Vec<Output>) -> Result<Vec<TaskRecord>, String> {
        let plan = plan_folds(&subsets_of(examples), self.cfg.folds_per_subset, self.cfg.seed).map_err(|e| e.to_string())?;
        out.push(Output::json(FOLDS_FILE, &plan));
        let students = self.students(examples, plan.fold_count).map_err(|f| f.cause)?;
        let refs: Vec<&dyn StudentRationaleClient> = students.iter().map(|s| s.as_ref()).collect();
        self.pool
            .install(|| build_apr(examples, &refs, &plan, self.cfg.student_samples, counter))
            .map_err(|e| e.to_string())
    }
}

fn rationale_map(records: Vec<RationaleRecord>) -> BTreeMap<String, RationaleRecord> {
    records.into_iter().map(|r| (r.example_id.clone(), r)).collect()
}

/// Runs `stages` in pipeline order.
pub fn run(cfg: &PipelineConfig, stages: &[Stage]) -> Result<RunReport, PipelineError> {
    let runner = Runner::new(cfg)?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut report = RunReport::default();
    for stage in stages {
        let status = runner.run_stage(stage)?;
        report.stages.push((stage, status));
    }
    Ok(report)
}

/// Votes over beam hypotheses grouped by example, writing one prediction
/// per example. Examples whose beams only say `None` (or cannot be parsed)
/// get that `None`/empty answer and a warning.
pub fn run_vote(input: &Path, output: &Path, calculator: bool) -> Result<usize, PipelineError> {
    let hyps: Vec<HypothesisRecord> = read_jsonl(input)?;
    let mut grouped: BTreeMap<String, Vec<ScoredHypothesis>> = BTreeMap::new();
    for h in hyps {
        grouped
            .entry(h.example_id)
            .or_default()
            .push(ScoredHypothesis::new(h.decoded, h.prob));
    }
    let mut preds = Vec::with_capacity(grouped.len());
    for (example_id, beam) in grouped {
        let result = if calculator { vote_with_calculator(&beam) } else { vote(&beam) };
        let pred = match result {
            Ok(v) => PredictionRecord {
                example_id,
                answer: v.answer,
                aggregate_prob: Some(v.aggregate_prob),
            },
            Err(e) => {
                log::warn!("{example_id}: {e}");
                let answer = if e == EvalError::AllNone { NONE_ANSWER } else { "" };
                PredictionRecord {
                    example_id,
                    answer: answer.to_string(),
                    aggregate_prob: None,
                }
            }
        };
        preds.push(pred);
    }
    write_atomic(output, &jsonl_bytes(&preds))?;
    Ok(preds.len())
}

/// Scores a prediction file against a gold file and writes the report.
pub fn run_eval(predictions: &Path, gold: &Path, metric: Metric, output: Option<&Path>) -> Result<MetricReport, PipelineError> {
    let preds: BTreeMap<String, String> = read_jsonl::<PredictionRecord>(predictions)?
        .into_iter()
        .map(|p| (p.example_id, p.answer))
        .collect();
    let golds: BTreeMap<String, Vec<String>> = read_jsonl::<GoldRecord>(gold)?
        .into_iter()
        .map(|g| (g.example_id, g.gold_answers))
        .collect();
    let report = evaluate(&preds, &golds, metric)?;
    if let Some(path) = output {
        write_atomic(path, &json_bytes(&report))?;
    }
    Ok(report)
}
