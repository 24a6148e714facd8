//! HTTP JSON clients. Request and response shapes:
//!
//! | tool | request | response |
//! |------|---------|----------|
//! | ocr | `{image}` | `{full_text, boxes}` |
//! | summarizer | `{prompt, temperature: 0.1, num_samples: 1}` | `{text}` |
//! | programmer | `{prompt, temperature, attempt}` | `{text}` |
//! | plot_to_table | `{image}` | `{table}` |
//! | verifier | `{mode: "greedy", image, text_input}` | `{answer}` |
//! | verifier | `{mode: "score", image, text_input, target}` | `{logprob}` |
//! | student | `{image, question, num_samples}` | `{samples}` |

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    verifier_prompt, HttpClient, OcrClient, OcrOutput, PlotToTableClient, ProgramRequest, ProgrammerClient,
    StudentRationaleClient, SummarizerClient, SummaryRequest, ToolError, VerifierClient,
};
use crate::model::{ImageRef, Table};

/// Summarizer sampling temperature.
pub const SUMMARY_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub ocr: Option<String>,
    pub summarizer: Option<String>,
    pub programmer: Option<String>,
    pub plot_to_table: Option<String>,
    pub verifier: Option<String>,
    /// One endpoint per fold; student `f` must not have been trained on fold `f`.
    pub students: Vec<String>,
}

fn field<T: serde::de::DeserializeOwned>(tool: &str, body: &Value, key: &str) -> Result<T, ToolError> {
    let v = body
        .get(key)
        .ok_or_else(|| ToolError::failure(tool, format!("response has no {key:?} field")))?;
    serde_json::from_value(v.clone()).map_err(|e| ToolError::failure(tool, format!("bad {key:?} field: {e}")))
}

pub struct RemoteOcr {
    pub http: Arc<HttpClient>,
    pub url: String,
}

impl OcrClient for RemoteOcr {
    fn recognize(&self, image: &ImageRef) -> Result<OcrOutput, ToolError> {
        let out = self.http.call("ocr", &self.url, &json!({ "image": image }))?;
        Ok(OcrOutput {
            full_text: field("ocr", &out.body, "full_text")?,
            boxes: field("ocr", &out.body, "boxes").unwrap_or_default(),
        })
    }
}

pub struct RemoteSummarizer {
    pub http: Arc<HttpClient>,
    pub url: String,
}

impl SummarizerClient for RemoteSummarizer {
    fn summarize(&self, req: &SummaryRequest<'_>) -> Result<String, ToolError> {
        let payload = json!({
            "prompt": req.prompt,
            "temperature": SUMMARY_TEMPERATURE,
            "num_samples": 1,
        });
        field("summarizer", &self.http.call("summarizer", &self.url, &payload)?.body, "text")
    }
}

pub struct RemoteProgrammer {
    pub http: Arc<HttpClient>,
    pub url: String,
    pub temperature: f64,
}

impl ProgrammerClient for RemoteProgrammer {
    fn write_program(&self, req: &ProgramRequest<'_>) -> Result<String, ToolError> {
        let payload = json!({
            "prompt": req.prompt,
            "temperature": self.temperature,
            "attempt": req.attempt,
        });
        field("programmer", &self.http.call("programmer", &self.url, &payload)?.body, "text")
    }
}

pub struct RemotePlotToTable {
    pub http: Arc<HttpClient>,
    pub url: String,
}

impl PlotToTableClient for RemotePlotToTable {
    fn to_table(&self, image: &ImageRef) -> Result<Table, ToolError> {
        let out = self.http.call("plot_to_table", &self.url, &json!({ "image": image }))?;
        field("plot_to_table", &out.body, "table")
    }
}

pub struct RemoteVerifier {
    pub http: Arc<HttpClient>,
    pub url: String,
}

impl VerifierClient for RemoteVerifier {
    fn greedy_answer(&self, image: &ImageRef, question: &str, rationale: Option<&str>) -> Result<String, ToolError> {
        let payload = json!({
            "mode": "greedy",
            "image": image,
            "text_input": verifier_prompt(question, rationale),
        });
        field("verifier", &self.http.call("verifier", &self.url, &payload)?.body, "answer")
    }

    fn answer_logprob(
        &self,
        image: &ImageRef,
        question: &str,
        answer: &str,
        rationale: Option<&str>,
    ) -> Result<f64, ToolError> {
        let payload = json!({
            "mode": "score",
            "image": image,
            "text_input": verifier_prompt(question, rationale),
            "target": answer,
        });
        let lp: f64 = field("verifier", &self.http.call("verifier", &self.url, &payload)?.body, "logprob")?;
        if lp.is_nan() || lp > 0.0 {
            return Err(ToolError::failure("verifier", format!("log-probability {lp} is not ≤ 0")));
        }
        Ok(lp)
    }
}

pub struct RemoteStudent {
    pub http: Arc<HttpClient>,
    pub url: String,
    pub trained_on: BTreeSet<usize>,
}

impl StudentRationaleClient for RemoteStudent {
    fn trained_on(&self) -> &BTreeSet<usize> {
        &self.trained_on
    }

    fn sample_rationales(&self, image: &ImageRef, question: &str, n: usize) -> Result<Vec<String>, ToolError> {
        let payload = json!({ "image": image, "question": question, "num_samples": n });
        let samples: Vec<String> = field("student", &self.http.call("student", &self.url, &payload)?.body, "samples")?;
        if samples.len() != n {
            return Err(ToolError::failure(
                "student",
                format!("asked for {n} samples, got {}", samples.len()),
            ));
        }
        Ok(samples)
    }
}

/// Stands in for a tool without a configured endpoint; every call fails.
struct Unconfigured(&'static str);

impl Unconfigured {
    fn fail<T>(&self) -> Result<T, ToolError> {
        Err(ToolError::failure(self.0, "no endpoint configured"))
    }
}

impl OcrClient for Unconfigured {
    fn recognize(&self, _: &ImageRef) -> Result<OcrOutput, ToolError> {
        self.fail()
    }
}

impl SummarizerClient for Unconfigured {
    fn summarize(&self, _: &SummaryRequest<'_>) -> Result<String, ToolError> {
        self.fail()
    }
}

impl ProgrammerClient for Unconfigured {
    fn write_program(&self, _: &ProgramRequest<'_>) -> Result<String, ToolError> {
        self.fail()
    }
}

impl VerifierClient for Unconfigured {
    fn greedy_answer(&self, _: &ImageRef, _: &str, _: Option<&str>) -> Result<String, ToolError> {
        self.fail()
    }

    fn answer_logprob(&self, _: &ImageRef, _: &str, _: &str, _: Option<&str>) -> Result<f64, ToolError> {
        self.fail()
    }
}

impl super::ToolSet {
    /// HTTP clients for every configured endpoint. Tools without one fail
    /// when called; plot-to-table is simply absent.
    pub fn remote(endpoints: &Endpoints, http: Arc<HttpClient>, programmer_temperature: f64) -> Self {
        let url = |u: &Option<String>| u.clone();
        super::ToolSet {
            ocr: match url(&endpoints.ocr) {
                Some(url) => Arc::new(RemoteOcr { http: http.clone(), url }),
                None => Arc::new(Unconfigured("ocr")),
            },
            summarizer: match url(&endpoints.summarizer) {
                Some(url) => Arc::new(RemoteSummarizer { http: http.clone(), url }),
                None => Arc::new(Unconfigured("summarizer")),
            },
            programmer: match url(&endpoints.programmer) {
                Some(url) => Arc::new(RemoteProgrammer {
                    http: http.clone(),
                    url,
                    temperature: programmer_temperature,
                }),
                None => Arc::new(Unconfigured("programmer")),
            },
            plot_to_table: url(&endpoints.plot_to_table).map(|url| {
                Arc::new(RemotePlotToTable { http: http.clone(), url }) as Arc<dyn PlotToTableClient>
            }),
            verifier: match url(&endpoints.verifier) {
                Some(url) => Arc::new(RemoteVerifier { http: http.clone(), url }),
                None => Arc::new(Unconfigured("verifier")),
            },
        }
    }
}

/// One remote student per configured endpoint; student `f` holds out fold `f`.
pub fn remote_students(endpoints: &Endpoints, http: Arc<HttpClient>) -> Vec<RemoteStudent> {
    let folds = endpoints.students.len();
    endpoints
        .students
        .iter()
        .enumerate()
        .map(|(f, url)| RemoteStudent {
            http: http.clone(),
            url: url.clone(),
            trained_on: (0..folds).filter(|&g| g != f).collect(),
        })
        .collect()
}
