use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{render_prompt, ProgramRequest, PromptTemplate, SummaryRequest, ToolError, ToolSet};
use crate::codec::{linearize_table, TokenCounter};
use crate::dsl;
use crate::model::{QAExample, Rationale, Table};

/// Maximum evidence length returned by the summarizer.
pub const EVIDENCE_TOKEN_LIMIT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flow {
    /// OCR, then summarizer evidence.
    #[default]
    TextEvidence,
    /// Structured table plus a programmer-written program.
    TableProgram,
}

impl FromStr for Flow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text-evidence" => Ok(Flow::TextEvidence),
            "table-program" => Ok(Flow::TableProgram),
            other => Err(format!("unknown flow {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Templates {
    pub summarizer: PromptTemplate,
    pub programmer: PromptTemplate,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    /// Programmer calls before giving up on an example.
    pub program_attempts: u32,
    pub evidence_limit: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            program_attempts: 3,
            evidence_limit: EVIDENCE_TOKEN_LIMIT,
        }
    }
}

fn ocr_text(example: &QAExample, tools: &ToolSet) -> Result<String, ToolError> {
    if !example.ocr_text.is_empty() || example.ocr_boxes.is_some() {
        return Ok(example.ocr_text.clone());
    }
    Ok(tools.ocr.recognize(&example.image)?.full_text)
}

fn table_for(example: &QAExample, tools: &ToolSet) -> Result<Table, ToolError> {
    if let Some(table) = &example.structured_table {
        return Ok(table.clone());
    }
    match &tools.plot_to_table {
        Some(client) => client.to_table(&example.image),
        None => Err(ToolError::MissingTable(example.example_id.clone())),
    }
}

/// Produces the tool rationale for one example.
///
/// Programs that fail to parse are re-requested up to
/// `program_attempts` times before `InvalidProgram` is returned.
pub fn generate_rationale(
    example: &QAExample,
    flow: Flow,
    tools: &ToolSet,
    templates: &Templates,
    options: &GenerateOptions,
    counter: &dyn TokenCounter,
) -> Result<Rationale, ToolError> {
    let question = example.question.as_str();
    let answer = example.answer();
    match flow {
        Flow::TextEvidence => {
            let ocr = ocr_text(example, tools)?;
            let bindings = BTreeMap::from([
                ("question", question.to_string()),
                ("answer", answer.to_string()),
                ("ocr", ocr.clone()),
            ]);
            let prompt = render_prompt(&templates.summarizer, &bindings)?;
            let evidence = tools.summarizer.summarize(&SummaryRequest {
                example_id: &example.example_id,
                question,
                answer,
                ocr: &ocr,
                prompt,
            })?;
            let evidence = counter.truncate(evidence.trim(), options.evidence_limit).trim_end();
            Ok(Rationale::evidence(evidence))
        }
        Flow::TableProgram => {
            let ocr = ocr_text(example, tools)?;
            let table = table_for(example, tools)?;
            let bindings = BTreeMap::from([
                ("question", question.to_string()),
                ("answer", answer.to_string()),
                ("ocr", ocr.clone()),
                ("table", linearize_table(&table)),
            ]);
            let prompt = render_prompt(&templates.programmer, &bindings)?;
            let mut last = String::new();
            let mut reason = String::from("no attempts made");
            for attempt in 0..options.program_attempts {
                let output = tools.programmer.write_program(&ProgramRequest {
                    example_id: &example.example_id,
                    question,
                    answer,
                    ocr: &ocr,
                    table: &table,
                    prompt: prompt.clone(),
                    attempt,
                })?;
                let source = output.trim().to_string();
                match dsl::parse(&source) {
                    Ok(_) => return Ok(Rationale::table_program(table, source)),
                    Err(e) => {
                        log::warn!(
                            "{}: programmer attempt {} produced invalid program {source:?}: {e}",
                            example.example_id,
                            attempt + 1
                        );
                        reason = e.to_string();
                        last = source;
                    }
                }
            }
            Err(ToolError::InvalidProgram {
                attempts: options.program_attempts,
                last,
                reason,
            })
        }
    }
}
