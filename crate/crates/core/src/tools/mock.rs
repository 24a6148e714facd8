//! Deterministic tool stand-ins.
//!
//! Every mock answers from the fixtures table when an entry exists and
//! otherwise computes a reply as a pure function of `(seed, request)`.
//! The mock verifier "sees" an image through the OCR boxes registered for it,
//! restricted to the crop window, and knows the answers listed in `answers`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    OcrClient, OcrOutput, PlotToTableClient, ProgramRequest, ProgrammerClient, StudentRationaleClient,
    SummarizerClient, SummaryRequest, ToolError, VerifierClient,
};
use crate::model::{ImageRef, OcrBox, QAExample, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierFixture {
    pub greedy: String,
    pub logp_with: f64,
    pub logp_without: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fixtures {
    pub seed: u64,
    /// OCR by uncropped image id.
    pub ocr: BTreeMap<String, OcrOutput>,
    /// Summarizer output by example id.
    pub summaries: BTreeMap<String, String>,
    /// Programmer outputs by example id, one per attempt (the last repeats).
    pub programs: BTreeMap<String, Vec<String>>,
    /// Plot-to-table output by uncropped image id.
    pub tables: BTreeMap<String, Table>,
    /// Answers the mock verifier knows, by question text.
    pub answers: BTreeMap<String, String>,
    /// Verifier scores by (possibly cropped) image id.
    pub verifier: BTreeMap<String, VerifierFixture>,
    /// Student samples by (possibly cropped) image id.
    pub students: BTreeMap<String, Vec<String>>,
    /// Tools that fail every call.
    pub down: BTreeSet<String>,
}

impl Fixtures {
    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolError::failure("fixtures", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ToolError::failure("fixtures", format!("{}: {e}", path.display())))
    }

    /// Registers the OCR carried by `examples` for images without an OCR fixture.
    pub fn with_example_ocr<'a>(mut self, examples: impl IntoIterator<Item = &'a QAExample>) -> Self {
        for ex in examples {
            if ex.image.crop.is_some() {
                continue;
            }
            self.ocr.entry(ex.image.id.clone()).or_insert_with(|| OcrOutput {
                full_text: ex.ocr_text.clone(),
                boxes: ex.ocr_boxes.clone().unwrap_or_default(),
            });
        }
        self
    }

    /// Lets the mock verifier know the first gold answer of every example.
    pub fn with_example_answers<'a>(mut self, examples: impl IntoIterator<Item = &'a QAExample>) -> Self {
        for ex in examples {
            self.answers
                .entry(ex.question.clone())
                .or_insert_with(|| ex.answer().to_string());
        }
        self
    }

    fn check_up(&self, tool: &str) -> Result<(), ToolError> {
        if self.down.contains(tool) {
            Err(ToolError::failure(tool, "tool is down (fixture)"))
        } else {
            Ok(())
        }
    }

    fn hash(&self, parts: &[&str]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update(p.as_bytes());
            h.update([0]);
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Uniform in [0, 1).
    fn unit(&self, parts: &[&str]) -> f64 {
        (self.hash(parts) >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Text visible in `image`: registered boxes inside its crop window.
    fn view(&self, image: &ImageRef) -> OcrOutput {
        let Some(full) = self.ocr.get(image.base_id()) else {
            return OcrOutput::default();
        };
        let Some(crop) = image.crop else {
            return full.clone();
        };
        if full.boxes.is_empty() {
            return full.clone();
        }
        let mut boxes: Vec<OcrBox> = full
            .boxes
            .iter()
            .filter(|b| {
                let (lo, hi) = b.span(crop.axis);
                crop.start <= lo && hi <= crop.end
            })
            .cloned()
            .collect();
        boxes.sort_by_key(|b| (b.y0, b.x0));
        OcrOutput {
            full_text: boxes.iter().map(|b| b.text.as_str()).collect::<Vec<_>>().join(" "),
            boxes,
        }
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && haystack.to_lowercase().contains(&needle.to_lowercase())
}

pub struct MockOcr(Arc<Fixtures>);

impl MockOcr {
    pub fn new(fixtures: Arc<Fixtures>) -> Self {
        MockOcr(fixtures)
    }
}

impl OcrClient for MockOcr {
    fn recognize(&self, image: &ImageRef) -> Result<OcrOutput, ToolError> {
        self.0.check_up("ocr")?;
        Ok(self.0.view(image))
    }
}

pub struct MockSummarizer(Arc<Fixtures>);

impl MockSummarizer {
    pub fn new(fixtures: Arc<Fixtures>) -> Self {
        MockSummarizer(fixtures)
    }
}

impl SummarizerClient for MockSummarizer {
    fn summarize(&self, req: &SummaryRequest<'_>) -> Result<String, ToolError> {
        self.0.check_up("summarizer")?;
        if let Some(s) = self.0.summaries.get(req.example_id) {
            return Ok(s.clone());
        }
        let words: Vec<&str> = req.ocr.split_whitespace().collect();
        if words.is_empty() {
            return Ok("No relevant text found.".to_string());
        }
        // a window of words around the first mention of the answer
        let first_answer_word = req.answer.split_whitespace().next().unwrap_or("");
        let hit = words.iter().position(|w| contains_ci(w, first_answer_word));
        let (from, to) = match hit {
            Some(i) => (i.saturating_sub(12), (i + 13).min(words.len())),
            None => (0, words.len().min(15)),
        };
        Ok(words[from..to].join(" "))
    }
}

pub struct MockProgrammer(Arc<Fixtures>);

impl MockProgrammer {
    pub fn new(fixtures: Arc<Fixtures>) -> Self {
        MockProgrammer(fixtures)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * b.abs().max(1.0)
}

/// Searches a few program shapes over the table's numbers for one that yields `answer`.
fn guess_program(table: &Table, answer: &str) -> String {
    let target = answer.trim().trim_end_matches('%').replace(',', "").parse::<f64>().ok();
    let Some(target) = target else {
        return format!("Find({})", answer.trim());
    };
    let nums: Vec<f64> = table
        .iter()
        .flatten()
        .filter_map(|c| c.trim().trim_end_matches('%').replace(',', "").parse::<f64>().ok())
        .filter(|x| x.is_finite())
        .take(20)
        .collect();
    let fmt = |x: f64| format!("{x}");
    for (i, &a) in nums.iter().enumerate() {
        for &b in &nums[i + 1..] {
            let shapes = [
                ("Diff", a, b, a - b),
                ("Diff", b, a, b - a),
                ("Sum", a, b, a + b),
                ("Div", a, b, a / b),
                ("Div", b, a, b / a),
                ("Mul", a, b, a * b),
            ];
            for (op, x, y, value) in shapes {
                if value.is_finite() && close(value, target) {
                    return format!("{op}({}, {})", fmt(x), fmt(y));
                }
            }
        }
    }
    if !nums.is_empty() {
        let mean = nums.iter().sum::<f64>() / nums.len() as f64;
        if close(mean, target) {
            let args: Vec<String> = nums.iter().map(|&x| fmt(x)).collect();
            return format!("Avg({})", args.join(", "));
        }
    }
    format!("Find({})", answer.trim())
}

impl ProgrammerClient for MockProgrammer {
    fn write_program(&self, req: &ProgramRequest<'_>) -> Result<String, ToolError> {
        self.0.check_up("programmer")?;
        if let Some(outputs) = self.0.programs.get(req.example_id) {
            if let Some(last) = outputs.last() {
                return Ok(outputs.get(req.attempt as usize).unwrap_or(last).clone());
            }
        }
        Ok(guess_program(req.table, req.answer))
    }
}

pub struct MockPlotToTable(Arc<Fixtures>);

impl MockPlotToTable {
    pub fn new(fixtures: Arc<Fixtures>) -> Self {
        MockPlotToTable(fixtures)
    }
}

impl PlotToTableClient for MockPlotToTable {
    fn to_table(&self, image: &ImageRef) -> Result<Table, ToolError> {
        self.0.check_up("plot_to_table")?;
        self.0
            .tables
            .get(image.base_id())
            .cloned()
            .ok_or_else(|| ToolError::failure("plot_to_table", format!("no table fixture for {}", image.base_id())))
    }
}

pub struct MockVerifier(Arc<Fixtures>);

impl MockVerifier {
    pub fn new(fixtures: Arc<Fixtures>) -> Self {
        MockVerifier(fixtures)
    }

    fn in_view(&self, image: &ImageRef, answer: &str) -> bool {
        contains_ci(&self.0.view(image).full_text, answer)
    }
}

impl VerifierClient for MockVerifier {
    fn greedy_answer(&self, image: &ImageRef, question: &str, rationale: Option<&str>) -> Result<String, ToolError> {
        let fx = &self.0;
        fx.check_up("verifier")?;
        if let Some(v) = fx.verifier.get(&image.id) {
            return Ok(v.greedy.clone());
        }
        if let Some(answer) = fx.answers.get(question) {
            if self.in_view(image, answer) {
                return Ok(answer.clone());
            }
        }
        // a deterministic distractor from what is visible
        let view = fx.view(image);
        let words: Vec<&str> = view
            .full_text
            .split_whitespace()
            .chain(rationale.unwrap_or("").split_whitespace())
            .collect();
        if words.is_empty() {
            return Ok("unanswerable".to_string());
        }
        let i = fx.hash(&["greedy", &image.id, question]) as usize % words.len();
        Ok(words[i].to_string())
    }

    fn answer_logprob(
        &self,
        image: &ImageRef,
        question: &str,
        answer: &str,
        rationale: Option<&str>,
    ) -> Result<f64, ToolError> {
        let fx = &self.0;
        fx.check_up("verifier")?;
        if let Some(v) = fx.verifier.get(&image.id) {
            return Ok(if rationale.is_some() { v.logp_with } else { v.logp_without });
        }
        let u = fx.unit(&["logp", &image.id, question, answer]);
        let without = if self.in_view(image, answer) {
            -0.7 - 1.5 * u
        } else {
            -4.0 - 4.0 * u
        };
        let Some(r) = rationale else {
            return Ok(without);
        };
        let v = fx.unit(&["boost", &image.id, question, answer, r]);
        // probability ratio with/without the rationale
        let ratio = if contains_ci(r, answer) { 0.8 + 2.4 * v } else { 0.5 + 1.0 * v };
        Ok((without + ratio.ln()).min(-1e-3))
    }
}

/// Student model holding out one fold.
pub struct MockStudent {
    fixtures: Arc<Fixtures>,
    trained_on: BTreeSet<usize>,
}

impl MockStudent {
    pub fn new(fixtures: Arc<Fixtures>, trained_on: BTreeSet<usize>) -> Self {
        MockStudent { fixtures, trained_on }
    }

    /// Students for `folds` folds, student `f` trained on every fold but `f`.
    pub fn per_fold(fixtures: Arc<Fixtures>, folds: usize) -> Vec<MockStudent> {
        (0..folds)
            .map(|f| MockStudent::new(fixtures.clone(), (0..folds).filter(|&g| g != f).collect()))
            .collect()
    }
}

impl StudentRationaleClient for MockStudent {
    fn trained_on(&self) -> &BTreeSet<usize> {
        &self.trained_on
    }

    fn sample_rationales(&self, image: &ImageRef, question: &str, n: usize) -> Result<Vec<String>, ToolError> {
        let fx = &self.fixtures;
        fx.check_up("student")?;
        if let Some(samples) = fx.students.get(&image.id) {
            if !samples.is_empty() {
                return Ok((0..n).map(|i| samples[i % samples.len()].clone()).collect());
            }
        }
        let view = fx.view(image);
        let words: Vec<&str> = view.full_text.split_whitespace().collect();
        Ok((0..n)
            .map(|i| {
                let tag = i.to_string();
                if words.is_empty() {
                    return format!("no text found for {question}");
                }
                let start = fx.hash(&["student", &image.id, question, &tag]) as usize % words.len();
                let len = 8 + fx.hash(&["student-len", &image.id, question, &tag]) as usize % 13;
                words[start..(start + len).min(words.len())].join(" ")
            })
            .collect())
    }
}
