//! Inference post-processing and evaluation metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{parse_target, ANSWER_SEP, PROGRAM_SEP};
use crate::dsl::{self, ExecResult};
use crate::model::{is_none_answer, ScoredHypothesis};

/// Similarity threshold below which ANLS scores zero.
pub const ANLS_TAU: f64 = 0.5;
/// Relative tolerance for relaxed accuracy.
pub const RA_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("every hypothesis answers None")]
    AllNone,
    #[error("no hypothesis could be parsed")]
    NoParseableHypothesis,
    #[error("nothing to evaluate")]
    Empty,
    #[error("no gold answers for {0}")]
    MissingGold(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub answer: String,
    pub aggregate_prob: f64,
    /// Summed probability per distinct answer, in first-seen order.
    pub tally: IndexMap<String, f64>,
}

/// Sums beam probabilities per distinct answer and returns the best answer
/// that is not `None`. Ties go to the answer seen first.
pub fn vote(hypotheses: &[ScoredHypothesis]) -> Result<VoteResult, EvalError> {
    vote_answers(hypotheses.iter().filter_map(|h| match parse_target(&h.decoded) {
        Ok(t) => Some((t.answer, h.prob)),
        Err(e) => {
            log::warn!("skipping unparseable hypothesis {:?}: {e}", h.decoded);
            None
        }
    }))
}

/// Like [`vote`], but each hypothesis' answer is first replaced by the
/// calculator result of its program. `None` answers stay `None`.
pub fn vote_with_calculator(hypotheses: &[ScoredHypothesis]) -> Result<VoteResult, EvalError> {
    vote_answers(hypotheses.iter().filter_map(|h| match parse_target(&h.decoded) {
        Ok(t) if t.is_none() => Some((t.answer, h.prob)),
        Ok(t) => Some((apply_calculator(&h.decoded, &t.answer), h.prob)),
        Err(e) => {
            log::warn!("skipping unparseable hypothesis {:?}: {e}", h.decoded);
            None
        }
    }))
}

fn vote_answers(answers: impl Iterator<Item = (String, f64)>) -> Result<VoteResult, EvalError> {
    let mut tally: IndexMap<String, f64> = IndexMap::new();
    for (answer, prob) in answers {
        *tally.entry(answer).or_insert(0.0) += prob;
    }
    if tally.is_empty() {
        return Err(EvalError::NoParseableHypothesis);
    }
    let mut best: Option<(&String, f64)> = None;
    for (answer, &p) in &tally {
        if is_none_answer(answer) {
            continue;
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((answer, p));
        }
    }
    let (answer, aggregate_prob) = best.ok_or(EvalError::AllNone)?;
    Ok(VoteResult {
        answer: answer.clone(),
        aggregate_prob,
        tally,
    })
}

/// Replaces the answer with the result of the program in the rationale, if
/// there is one that runs. `Find` and broken programs keep `fallback`.
pub fn apply_calculator(decoded: &str, fallback: &str) -> String {
    let Some(pos) = decoded.rfind(PROGRAM_SEP) else {
        return fallback.to_string();
    };
    let tail = &decoded[pos + PROGRAM_SEP.len()..];
    let source = match tail.find(ANSWER_SEP) {
        Some(end) => &tail[..end],
        None => tail,
    };
    let computed = dsl::parse(source.trim())
        .and_then(|p| dsl::execute(&p))
        .map(|r| match r {
            ExecResult::Passthrough => None,
            other => other.render().and_then(Result::ok),
        });
    match computed {
        Ok(Some(answer)) => answer,
        _ => fallback.to_string(),
    }
}

fn normalize(s: &str) -> Vec<char> {
    s.trim().to_lowercase().chars().collect()
}

/// Normalized Levenshtein similarity against the best-matching gold answer.
pub fn anls(pred: &str, golds: &[String], tau: f64) -> f64 {
    let p = normalize(pred);
    golds
        .iter()
        .map(|g| {
            let g = normalize(g);
            let dist = strsim::generic_levenshtein(&p, &g) as f64;
            let nl = dist / p.len().max(g.len()).max(1) as f64;
            if nl < tau {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

fn as_number(s: &str) -> Option<f64> {
    let cleaned: String = s.chars().filter(|c| !matches!(c, '%' | ',') && !c.is_whitespace()).collect();
    cleaned.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// 1 when the prediction is within 5% of a numeric gold, or equal to it
/// ignoring case otherwise.
pub fn relaxed_accuracy(pred: &str, gold: &str) -> f64 {
    let hit = match (as_number(pred), as_number(gold)) {
        (Some(p), Some(0.0)) => p == 0.0,
        // The slack only absorbs rounding at the exact 5% boundary.
        (Some(p), Some(g)) => (p - g).abs() <= RA_TOLERANCE * g.abs() * (1.0 + 1e-12),
        _ => pred.trim().to_lowercase() == gold.trim().to_lowercase(),
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "ANLS")]
    Anls,
    #[serde(rename = "RA")]
    Ra,
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "anls" => Ok(Metric::Anls),
            "ra" => Ok(Metric::Ra),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Anls => "ANLS",
            Metric::Ra => "RA",
        })
    }
}

impl Metric {
    /// Score of one prediction, best over the gold answers.
    pub fn score(self, pred: &str, golds: &[String]) -> f64 {
        match self {
            Metric::Anls => anls(pred, golds, ANLS_TAU),
            Metric::Ra => golds.iter().map(|g| relaxed_accuracy(pred, g)).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub example_ids: Vec<String>,
    pub per_example: Vec<f64>,
    pub mean: f64,
}

/// Scores every prediction against its golds. Ids are visited in sorted order;
/// a prediction with no gold entry is an error, a gold with no prediction
/// scores as an empty answer.
pub fn evaluate(
    predictions: &BTreeMap<String, String>,
    golds: &BTreeMap<String, Vec<String>>,
    metric: Metric,
) -> Result<MetricReport, EvalError> {
    if let Some(id) = predictions.keys().find(|id| !golds.contains_key(*id)) {
        return Err(EvalError::MissingGold(id.clone()));
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let items: Vec<(&String, &Vec<String>)> = golds.iter().collect();
    let per_example: Vec<f64> = items
        .par_iter()
        .map(|(id, gold)| {
            let pred = predictions.get(*id).map(String::as_str).unwrap_or_else(|| {
                log::warn!("no prediction for {id}");
                ""
            });
            metric.score(pred, gold)
        })
        .collect();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(MetricReport {
        metric,
        example_ids: items.into_iter().map(|(id, _)| id.clone()).collect(),
        per_example,
        mean,
    })
}

/// One beam entry as read by the `vote` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub example_id: String,
    pub decoded: String,
    pub prob: f64,
}

/// Final answer per example, as written by `vote` and read by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate_prob: Option<f64>,
}

/// Gold answers; extra fields (e.g. a full example) are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub example_id: String,
    pub gold_answers: Vec<String>,
}
