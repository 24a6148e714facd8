//! Client interfaces for the external tools (OCR, summarizer, programmer,
//! plot-to-table, verifier, student rationale samplers), with HTTP-backed
//! and fixture-driven mock implementations.

mod generate;
mod http;
mod mock;
mod remote;
mod template;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageRef, OcrBox, Table};

pub use generate::{generate_rationale, Flow, GenerateOptions, Templates, EVIDENCE_TOKEN_LIMIT};
pub use http::{http_call, CallOutcome, HttpClient, HttpResponse, RetryPolicy, Semaphore, Transport, UreqTransport};
pub use mock::{
    Fixtures, MockOcr, MockPlotToTable, MockProgrammer, MockStudent, MockSummarizer, MockVerifier, VerifierFixture,
};
pub use remote::{
    remote_students, Endpoints, RemoteOcr, RemotePlotToTable, RemoteProgrammer, RemoteStudent, RemoteSummarizer,
    RemoteVerifier, SUMMARY_TEMPERATURE,
};
pub use template::{render_prompt, PromptTemplate, TemplateKind, PROGRAMMER_SHOTS, SUMMARIZER_SHOTS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("{tool} failed after {attempts} attempt(s): {cause}")]
    ToolFailure { tool: String, cause: String, attempts: u32 },
    #[error("no valid program after {attempts} attempt(s); last output {last:?}: {reason}")]
    InvalidProgram { attempts: u32, last: String, reason: String },
    #[error("missing binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("example {0} has no structured table and no plot-to-table client is configured")]
    MissingTable(String),
    #[error("template error: {0}")]
    Template(String),
}

impl ToolError {
    pub fn failure(tool: &str, cause: impl Into<String>) -> Self {
        ToolError::ToolFailure {
            tool: tool.to_string(),
            cause: cause.into(),
            attempts: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OcrOutput {
    pub full_text: String,
    #[serde(default)]
    pub boxes: Vec<OcrBox>,
}

pub trait OcrClient: Send + Sync {
    fn recognize(&self, image: &ImageRef) -> Result<OcrOutput, ToolError>;
}

/// Everything a summarizer may look at; `prompt` is the rendered template.
#[derive(Debug, Clone)]
pub struct SummaryRequest<'a> {
    pub example_id: &'a str,
    pub question: &'a str,
    pub answer: &'a str,
    pub ocr: &'a str,
    pub prompt: String,
}

pub trait SummarizerClient: Send + Sync {
    fn summarize(&self, request: &SummaryRequest<'_>) -> Result<String, ToolError>;
}

#[derive(Debug, Clone)]
pub struct ProgramRequest<'a> {
    pub example_id: &'a str,
    pub question: &'a str,
    pub answer: &'a str,
    pub ocr: &'a str,
    pub table: &'a Table,
    pub prompt: String,
    /// Zero-based attempt number.
    pub attempt: u32,
}

pub trait ProgrammerClient: Send + Sync {
    fn write_program(&self, request: &ProgramRequest<'_>) -> Result<String, ToolError>;
}

pub trait PlotToTableClient: Send + Sync {
    fn to_table(&self, image: &ImageRef) -> Result<Table, ToolError>;
}

/// Text-encoder input of the verifier.
pub fn verifier_prompt(question: &str, rationale: Option<&str>) -> String {
    match rationale {
        Some(r) => format!("{r} Answer in en: {question}"),
        None => format!("Answer in en: {question}"),
    }
}

pub trait VerifierClient: Send + Sync {
    /// Greedy decode given the image, question and optional rationale.
    fn greedy_answer(&self, image: &ImageRef, question: &str, rationale: Option<&str>) -> Result<String, ToolError>;

    /// Log-probability (≤ 0) of `answer`.
    fn answer_logprob(
        &self,
        image: &ImageRef,
        question: &str,
        answer: &str,
        rationale: Option<&str>,
    ) -> Result<f64, ToolError>;
}

/// A student model trained on some folds, sampling rationales for the rest.
pub trait StudentRationaleClient: Send + Sync {
    fn trained_on(&self) -> &BTreeSet<usize>;

    fn sample_rationales(&self, image: &ImageRef, question: &str, n: usize) -> Result<Vec<String>, ToolError>;
}

/// The tool clients used by one run.
#[derive(Clone)]
pub struct ToolSet {
    pub ocr: Arc<dyn OcrClient>,
    pub summarizer: Arc<dyn SummarizerClient>,
    pub programmer: Arc<dyn ProgrammerClient>,
    pub plot_to_table: Option<Arc<dyn PlotToTableClient>>,
    pub verifier: Arc<dyn VerifierClient>,
}

impl ToolSet {
    /// Mock tools driven by `fixtures`.
    pub fn mock(fixtures: Arc<Fixtures>) -> Self {
        let plot_to_table: Option<Arc<dyn PlotToTableClient>> = if fixtures.tables.is_empty() {
            None
        } else {
            Some(Arc::new(MockPlotToTable::new(fixtures.clone())))
        };
        ToolSet {
            ocr: Arc::new(MockOcr::new(fixtures.clone())),
            summarizer: Arc::new(MockSummarizer::new(fixtures.clone())),
            programmer: Arc::new(MockProgrammer::new(fixtures.clone())),
            plot_to_table,
            verifier: Arc::new(MockVerifier::new(fixtures)),
        }
    }
}
