//! Rationale distillation toolkit: builds rationale-annotated, filtered and
//! balanced multi-task training sets for visual question answering students,
//! and provides the inference-side voting, calculator and metrics.

pub mod codec;
pub mod crop;
pub mod dsl;
pub mod eval;
pub mod filter;
pub mod model;
pub mod pipeline;
pub mod tasks;
pub mod tools;

pub use codec::{parse_target, DecodedTarget, TokenCounter};
pub use crop::{apply_plan, plan_crops, CropMode, CropPlan};
pub use model::{
    is_none_answer, parse_record, serialize_record, ImageRef, QAExample, Rationale, ScoredHypothesis, TaskKind,
    TaskRecord, NONE_ANSWER,
};
