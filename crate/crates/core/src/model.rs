//! Domain types shared by every pipeline stage, plus the line-delimited
//! record encoding used to hand data between stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Answer assigned to crops that cannot support the gold answer.
pub const NONE_ANSWER: &str = "None";

/// True when `answer` is the `None` sentinel (surrounding whitespace ignored).
pub fn is_none_answer(answer: &str) -> bool {
    answer.trim() == NONE_ANSWER
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("invalid example {id}: {reason}")]
    InvalidExample { id: String, reason: String },
    #[error("invalid task record {id}: {reason}")]
    InvalidTaskRecord { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Height,
    Width,
}

/// Crop rectangle along one axis, in parent-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub axis: Axis,
    pub start: u32,
    pub end: u32,
}

impl Crop {
    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Image geometry and a reference to the pixels; never the pixels themselves.
///
/// For crops `height`/`width` stay those of the parent image and `crop`
/// selects the window.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub id: String,
    pub height: u32,
    pub width: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<Crop>,
    #[serde(default)]
    pub source_uri: String,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, height: u32, width: u32) -> Self {
        ImageRef {
            id: id.into(),
            height,
            width,
            crop: None,
            source_uri: String::new(),
        }
    }

    /// Id of the uncropped image this reference points into.
    pub fn base_id(&self) -> &str {
        match self.id.find("#c") {
            Some(pos) if self.crop.is_some() => &self.id[..pos],
            _ => &self.id,
        }
    }

    pub fn extent(&self, axis: Axis) -> u32 {
        match axis {
            Axis::Height => self.height,
            Axis::Width => self.width,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.height == 0 || self.width == 0 {
            return Err(format!(
                "image {} has non-positive geometry {}x{}",
                self.id, self.height, self.width
            ));
        }
        if let Some(crop) = &self.crop {
            let extent = self.extent(crop.axis);
            if crop.start >= crop.end || crop.end > extent {
                return Err(format!(
                    "image {} crop [{}, {}) outside extent {}",
                    self.id, crop.start, crop.end, extent
                ));
            }
            if crop.len() > self.height.min(self.width) {
                return Err(format!(
                    "image {} crop longer than the short edge",
                    self.id
                ));
            }
        }
        Ok(())
    }
}

/// One recognized text fragment with its pixel box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrBox {
    pub text: String,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl OcrBox {
    pub fn new(text: impl Into<String>, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        OcrBox {
            text: text.into(),
            x0,
            y0,
            x1,
            y1,
        }
    }

    /// Span of the box along `axis`.
    pub fn span(&self, axis: Axis) -> (u32, u32) {
        match axis {
            Axis::Height => (self.y0, self.y1),
            Axis::Width => (self.x0, self.x1),
        }
    }
}

pub type Table = Vec<Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAExample {
    pub example_id: String,
    pub image: ImageRef,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub ocr_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_boxes: Option<Vec<OcrBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_table: Option<Table>,
    /// Dataset subset (e.g. augmented vs. human) used for fold planning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

impl QAExample {
    /// Canonical gold answer used by the filters: the first one listed.
    pub fn answer(&self) -> &str {
        &self.gold_answers[0]
    }

    pub fn subset_name(&self) -> &str {
        self.subset.as_deref().unwrap_or("train")
    }

    /// Ingest-time validation.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidExample {
            id: self.example_id.clone(),
            reason,
        };
        if self.example_id.is_empty() {
            return Err(fail("empty example_id".into()));
        }
        if self.gold_answers.is_empty() {
            return Err(fail("no gold answers".into()));
        }
        if self.gold_answers.iter().any(|a| is_none_answer(a)) {
            return Err(fail("gold answer equals the None sentinel".into()));
        }
        self.image.validate().map_err(fail)?;
        if let Some(boxes) = &self.ocr_boxes {
            for b in boxes {
                if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 > self.image.width || b.y1 > self.image.height {
                    return Err(fail(format!("ocr box {:?} outside image bounds", b.text)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Tool,
    Student,
}

/// Intermediate output predicted before the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Rationale {
    TextEvidence {
        evidence: String,
        #[serde(default)]
        origin: Origin,
    },
    TableProgram {
        table: Table,
        program_source: String,
        #[serde(default)]
        origin: Origin,
    },
}

impl Rationale {
    pub fn evidence(evidence: impl Into<String>) -> Self {
        Rationale::TextEvidence {
            evidence: evidence.into(),
            origin: Origin::Tool,
        }
    }

    pub fn table_program(table: Table, program_source: impl Into<String>) -> Self {
        Rationale::TableProgram {
            table,
            program_source: program_source.into(),
            origin: Origin::Tool,
        }
    }

    pub fn origin(&self) -> Origin {
        match self {
            Rationale::TextEvidence { origin, .. } | Rationale::TableProgram { origin, .. } => *origin,
        }
    }

    /// True when there is nothing to predict.
    pub fn is_blank(&self) -> bool {
        match self {
            Rationale::TextEvidence { evidence, .. } => evidence.trim().is_empty(),
            Rationale::TableProgram {
                table,
                program_source,
                ..
            } => program_source.trim().is_empty() && table.iter().all(|r| r.is_empty()),
        }
    }

    /// Untrimmed text form, as fed to the verifier.
    pub fn to_text(&self) -> String {
        match self {
            Rationale::TextEvidence { evidence, .. } => evidence.clone(),
            Rationale::TableProgram {
                table,
                program_source,
                ..
            } => {
                let lin = crate::codec::linearize_table(table);
                if lin.is_empty() {
                    format!("{} {}", crate::codec::PROGRAM_SEP, program_source)
                } else {
                    format!("{} {} {}", lin, crate::codec::PROGRAM_SEP, program_source)
                }
            }
        }
    }
}

/// Output of rationale generation for one (possibly cropped) example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RationaleRecord {
    pub example_id: String,
    pub rationale: Rationale,
    /// Set when the programmer never produced a valid program; such records
    /// are kept for auditing but excluded from rationale-prediction tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_program: Option<String>,
}

impl RationaleRecord {
    pub fn is_flagged(&self) -> bool {
        self.invalid_program.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "QRA")]
    Qra,
    #[serde(rename = "APR")]
    Apr,
    #[serde(rename = "QRACI")]
    Qraci,
    #[serde(rename = "APRCI")]
    Aprci,
    #[serde(rename = "QID")]
    Qid,
    #[serde(rename = "ANS_ONLY")]
    AnsOnly,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Qra,
        TaskKind::Apr,
        TaskKind::Qraci,
        TaskKind::Aprci,
        TaskKind::Qid,
        TaskKind::AnsOnly,
    ];

    /// Tasks whose decoder input is empty.
    pub fn has_empty_input(self) -> bool {
        matches!(
            self,
            TaskKind::Qra | TaskKind::Qraci | TaskKind::Qid | TaskKind::AnsOnly
        )
    }

    /// Tasks whose decoder output is the bare answer rather than a full target.
    pub fn answer_only_output(self) -> bool {
        matches!(self, TaskKind::Apr | TaskKind::Aprci | TaskKind::AnsOnly)
    }

    /// Name used on the command line and for output files.
    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::Qra => "qra",
            TaskKind::Apr => "apr",
            TaskKind::Qraci => "qraci",
            TaskKind::Aprci => "apraci",
            TaskKind::Qid => "qid",
            TaskKind::AnsOnly => "ans-only",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qra" => Ok(TaskKind::Qra),
            "apr" => Ok(TaskKind::Apr),
            "qraci" => Ok(TaskKind::Qraci),
            "apraci" | "aprci" => Ok(TaskKind::Aprci),
            "qid" => Ok(TaskKind::Qid),
            "ans-only" | "ans_only" | "ansonly" => Ok(TaskKind::AnsOnly),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// One emitted training line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task: TaskKind,
    pub example_id: String,
    pub image: ImageRef,
    pub decoder_input: String,
    pub decoder_output: String,
}

impl TaskRecord {
    pub fn new(
        task: TaskKind,
        example_id: impl Into<String>,
        image: ImageRef,
        decoder_input: impl Into<String>,
        decoder_output: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let record = TaskRecord {
            task,
            example_id: example_id.into(),
            image,
            decoder_input: decoder_input.into(),
            decoder_output: decoder_output.into(),
        };
        record.validate().map_err(|reason| ModelError::InvalidTaskRecord {
            id: record.example_id.clone(),
            reason,
        })?;
        Ok(record)
    }

    fn validate(&self) -> Result<(), String> {
        if self.task.has_empty_input() != self.decoder_input.is_empty() {
            return Err(format!(
                "decoder_input must be {} for task {}",
                if self.task.has_empty_input() { "empty" } else { "non-empty" },
                self.task
            ));
        }
        if self.decoder_output.is_empty() {
            return Err("decoder_output is empty".into());
        }
        self.image.validate()
    }
}

/// Serializes a task record as one line with a fixed field order.
pub fn serialize_record(record: &TaskRecord) -> String {
    serde_json::to_string(record).expect("task records always serialize")
}

/// Parses one serialized task record. `line_no` is only used for error reporting.
pub fn parse_record(line: &str, line_no: usize) -> Result<TaskRecord, ModelError> {
    let malformed = |reason: String| ModelError::MalformedRecord {
        line: line_no,
        reason,
    };
    let record: TaskRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    record.validate().map_err(malformed)?;
    Ok(record)
}

/// Beam hypothesis produced by an external decoder run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub decoded: String,
    pub prob: f64,
}

impl ScoredHypothesis {
    pub fn new(decoded: impl Into<String>, prob: f64) -> Self {
        ScoredHypothesis {
            decoded: decoded.into(),
            prob,
        }
    }
}
