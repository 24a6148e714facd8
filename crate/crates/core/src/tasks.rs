//! Builders for the student training sets.
//!
//! | task | encoder | decoder input | decoder output |
//! |------|---------|---------------|----------------|
//! | QRA | image | – | `q <s> r <answer> a` (tool rationale) |
//! | APR | image | `q <s> r̂` (student rationale) | `a` |
//! | QRACI | crop | – | `q <s> r_j <answer> ā`, ā = a or `None` |
//! | APRCI | crop | `q <s> r_j` (not useful r_j) | `a` |
//! | QID | image | – | `q <answer> a` |
//! | ANS_ONLY | image | – | `a` |

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_answer, encode_prefix, encode_program_rationale, encode_target, CodecError, TokenCounter, PREFIX_BUDGET};
use crate::filter::{Category, CategorizedExample};
use crate::model::{ModelError, QAExample, Rationale, RationaleRecord, TaskKind, TaskRecord, NONE_ANSWER};
use crate::tools::{StudentRationaleClient, ToolError};

/// Student rationales sampled per example.
pub const STUDENT_SAMPLES: usize = 3;
/// Folds per dataset subset for student rationale generation.
pub const FOLDS_PER_SUBSET: usize = 3;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("no usable rationale for {0}")]
    MissingRationale(String),
    #[error("fold leak: {0}")]
    FoldLeak(String),
    #[error("subset {subset:?} has {size} examples, fewer than {folds} folds")]
    SubsetTooSmall { subset: String, size: usize, folds: usize },
    #[error("example {0} appears in more than one subset")]
    OverlappingSubsets(String),
    #[error("cannot encode {example_id}: {source}")]
    Codec {
        example_id: String,
        #[source]
        source: CodecError,
    },
    #[error("student failed on {example_id}: {source}")]
    Tool {
        example_id: String,
        #[source]
        source: ToolError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn codec_err(example_id: &str) -> impl FnOnce(CodecError) -> TaskError + '_ {
    move |source| TaskError::Codec {
        example_id: example_id.to_string(),
        source,
    }
}

/// Text placed in the rationale slot of a decoder sequence.
pub fn rationale_slot(rationale: &Rationale, counter: &dyn TokenCounter) -> String {
    match rationale {
        Rationale::TextEvidence { evidence, .. } => evidence.trim().to_string(),
        Rationale::TableProgram {
            table,
            program_source,
            ..
        } => encode_program_rationale(table, program_source, counter),
    }
}

/// Question, tool rationale, answer on whole images.
pub fn build_qra(
    examples: &[QAExample],
    rationales: &BTreeMap<String, RationaleRecord>,
    counter: &dyn TokenCounter,
) -> Result<Vec<TaskRecord>, TaskError> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let record = rationales
            .get(&ex.example_id)
            .ok_or_else(|| TaskError::MissingRationale(ex.example_id.clone()))?;
        if let Some(reason) = &record.invalid_program {
            log::info!("{}: skipping QRA, flagged rationale ({reason})", ex.example_id);
            continue;
        }
        if record.rationale.is_blank() {
            return Err(TaskError::MissingRationale(ex.example_id.clone()));
        }
        let slot = rationale_slot(&record.rationale, counter);
        let output = encode_target(&ex.question, Some(&slot), ex.answer(), counter).map_err(codec_err(&ex.example_id))?;
        out.push(TaskRecord::new(TaskKind::Qra, &ex.example_id, ex.image.clone(), "", output)?);
    }
    Ok(out)
}

/// Answer prediction from `STUDENT_SAMPLES` held-out student rationales per example.
///
/// `students[f]` samples for the examples of fold `f` and must not have been
/// trained on it.
pub fn build_apr(
    examples: &[QAExample],
    students: &[&dyn StudentRationaleClient],
    plan: &FoldPlan,
    samples: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<TaskRecord>, TaskError> {
    for ex in examples {
        let fold = plan.fold_of(&ex.example_id)?;
        let student = students
            .get(fold)
            .ok_or_else(|| TaskError::FoldLeak(format!("no student for fold {fold}")))?;
        if student.trained_on().contains(&fold) {
            return Err(TaskError::FoldLeak(format!(
                "student for fold {fold} was trained on that fold ({})",
                ex.example_id
            )));
        }
    }
    let per_example: Vec<Vec<TaskRecord>> = examples
        .par_iter()
        .map(|ex| {
            let fold = plan.fold_of(&ex.example_id)?;
            let tool_err = |source| TaskError::Tool {
                example_id: ex.example_id.clone(),
                source,
            };
            let drafts = students[fold]
                .sample_rationales(&ex.image, &ex.question, samples)
                .map_err(tool_err)?;
            if drafts.len() != samples {
                return Err(tool_err(ToolError::failure(
                    "student",
                    format!("expected {samples} samples, got {}", drafts.len()),
                )));
            }
            let answer = encode_answer(ex.answer(), counter).map_err(codec_err(&ex.example_id))?;
            drafts
                .iter()
                .map(|r| {
                    let input = encode_prefix(&ex.question, Some(r), PREFIX_BUDGET, counter);
                    Ok(TaskRecord::new(TaskKind::Apr, &ex.example_id, ex.image.clone(), input, answer.clone())?)
                })
                .collect()
        })
        .collect::<Result<_, TaskError>>()?;
    Ok(per_example.into_iter().flatten().collect())
}

/// Rationale prediction on crops: useful crops with the gold answer,
/// irrelevant crops with `None`.
pub fn build_qraci(categorized: &[CategorizedExample], counter: &dyn TokenCounter) -> Result<Vec<TaskRecord>, TaskError> {
    categorized
        .iter()
        .filter(|c| c.category != Category::RelevantNotUseful)
        .map(|c| {
            let answer = match c.category {
                Category::Irrelevant => NONE_ANSWER,
                _ => c.effective_answer.as_str(),
            };
            let slot = rationale_slot(&c.rationale, counter);
            let output = encode_target(&c.question, Some(&slot), answer, counter).map_err(codec_err(&c.example_id))?;
            Ok(TaskRecord::new(TaskKind::Qraci, &c.example_id, c.image.clone(), "", output)?)
        })
        .collect()
}

/// Answer prediction on crops given their not-useful rationale.
pub fn build_apraci(categorized: &[CategorizedExample], counter: &dyn TokenCounter) -> Result<Vec<TaskRecord>, TaskError> {
    categorized
        .iter()
        .filter(|c| c.category == Category::RelevantNotUseful)
        .map(|c| {
            let slot = rationale_slot(&c.rationale, counter);
            let input = encode_prefix(&c.question, Some(&slot), PREFIX_BUDGET, counter);
            let output = encode_answer(&c.effective_answer, counter).map_err(codec_err(&c.example_id))?;
            Ok(TaskRecord::new(TaskKind::Aprci, &c.example_id, c.image.clone(), input, output)?)
        })
        .collect()
}

/// Question-in-decoder baseline.
pub fn build_qid(examples: &[QAExample], counter: &dyn TokenCounter) -> Result<Vec<TaskRecord>, TaskError> {
    examples
        .iter()
        .map(|ex| {
            let output = encode_target(&ex.question, None, ex.answer(), counter).map_err(codec_err(&ex.example_id))?;
            Ok(TaskRecord::new(TaskKind::Qid, &ex.example_id, ex.image.clone(), "", output)?)
        })
        .collect()
}

/// Answer-only baseline.
pub fn build_ans_only(examples: &[QAExample], counter: &dyn TokenCounter) -> Result<Vec<TaskRecord>, TaskError> {
    examples
        .iter()
        .map(|ex| {
            let output = encode_answer(ex.answer(), counter).map_err(codec_err(&ex.example_id))?;
            Ok(TaskRecord::new(TaskKind::AnsOnly, &ex.example_id, ex.image.clone(), "", output)?)
        })
        .collect()
}

/// Answer carried by a task record's decoder output.
pub fn record_answer(record: &TaskRecord) -> Result<String, CodecError> {
    if record.task.answer_only_output() {
        let a = record.decoder_output.trim();
        if a.is_empty() {
            return Err(CodecError::EmptyAnswer);
        }
        Ok(a.to_string())
    } else {
        crate::codec::parse_target(&record.decoder_output).map(|t| t.answer)
    }
}

/// Seeded k-fold partition, planned independently per subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub subsets: Vec<String>,
    pub folds_per_subset: usize,
    pub fold_count: usize,
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_of(&self, example_id: &str) -> Result<usize, TaskError> {
        match self.assignment.get(example_id) {
            Some(&f) if f < self.fold_count => Ok(f),
            Some(&f) => Err(TaskError::FoldLeak(format!("{example_id} assigned to missing fold {f}"))),
            None => Err(TaskError::FoldLeak(format!("{example_id} is not covered by the fold plan"))),
        }
    }

    /// Members of fold `f`, sorted.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Folds the student for `fold` trains on.
    pub fn training_folds(&self, fold: usize) -> BTreeSet<usize> {
        (0..self.fold_count).filter(|&f| f != fold).collect()
    }
}

/// Partitions each subset into `folds_per_subset` shuffled folds; fold
/// indices are global, subsets taken in name order.
pub fn plan_folds(
    subsets: &BTreeMap<String, Vec<String>>,
    folds_per_subset: usize,
    seed: u64,
) -> Result<FoldPlan, TaskError> {
    let mut assignment = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (si, (name, ids)) in subsets.iter().enumerate() {
        let mut ids: Vec<&String> = ids.iter().collect();
        ids.sort();
        ids.dedup();
        if ids.len() < folds_per_subset || folds_per_subset == 0 {
            return Err(TaskError::SubsetTooSmall {
                subset: name.clone(),
                size: ids.len(),
                folds: folds_per_subset,
            });
        }
        ids.shuffle(&mut rng);
        for (pos, id) in ids.into_iter().enumerate() {
            let fold = si * folds_per_subset + pos % folds_per_subset;
            if assignment.insert(id.clone(), fold).is_some() {
                return Err(TaskError::OverlappingSubsets(id.clone()));
            }
        }
    }
    Ok(FoldPlan {
        subsets: subsets.keys().cloned().collect(),
        folds_per_subset,
        fold_count: subsets.len() * folds_per_subset,
        assignment,
        seed,
    })
}

/// Groups example ids by subset name.
pub fn subsets_of(examples: &[QAExample]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for ex in examples {
        out.entry(ex.subset_name().to_string())
            .or_default()
            .push(ex.example_id.clone());
    }
    out
}
