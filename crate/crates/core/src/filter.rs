//! Relevance and rationale filters over (crop, rationale) pairs, and the
//! subsampling that balances `None`-labelled examples against the rest.
//!
//! A pair is *irrelevant* when the verifier's greedy answer given the
//! rationale differs from the gold answer; its training answer becomes
//! `None`. Otherwise the rationale is *useful* when it boosts the gold
//! answer's score by the configured factor, and *relevant but not useful*
//! when it does not.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageRef, QAExample, Rationale, NONE_ANSWER};
use crate::tools::{ToolError, VerifierClient};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("verifier failed on {example_id}: {source}")]
    Tool {
        example_id: String,
        #[source]
        source: ToolError,
    },
    #[error("invalid filter config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpace {
    /// `p_with >= λ · p_without`
    #[default]
    Probability,
    /// `log p_with >= λ · log p_without`
    Log,
}

impl FromStr for ScoreSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probability" => Ok(ScoreSpace::Probability),
            "log" => Ok(ScoreSpace::Log),
            other => Err(format!("unknown score space {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub boost_factor: f64,
    pub space: ScoreSpace,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            boost_factor: 2.0,
            space: ScoreSpace::Probability,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let ok = match self.space {
            ScoreSpace::Probability => self.boost_factor > 1.0,
            ScoreSpace::Log => self.boost_factor > 0.0,
        };
        if ok && self.boost_factor.is_finite() {
            Ok(())
        } else {
            Err(FilterError::Config(format!(
                "boost factor {} is out of range for {:?} space",
                self.boost_factor, self.space
            )))
        }
    }

    /// Does the rationale boost the gold answer enough?
    pub fn is_useful(&self, logp_with: f64, logp_without: f64) -> bool {
        match self.space {
            ScoreSpace::Probability => logp_with.exp() >= self.boost_factor * logp_without.exp(),
            ScoreSpace::Log => logp_with >= self.boost_factor * logp_without,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Irrelevant,
    RelevantNotUseful,
    Useful,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub greedy: String,
    /// Not computed for irrelevant pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_with: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_without: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedExample {
    pub example_id: String,
    pub question: String,
    pub image: ImageRef,
    pub rationale: Rationale,
    pub category: Category,
    pub effective_answer: String,
    pub scores: Scores,
}

/// Runs both filters for one pair. The canonical gold answer is the first one.
pub fn categorize(
    example: &QAExample,
    rationale: &Rationale,
    verifier: &dyn VerifierClient,
    cfg: &FilterConfig,
) -> Result<CategorizedExample, FilterError> {
    let tool_err = |source| FilterError::Tool {
        example_id: example.example_id.clone(),
        source,
    };
    let gold = example.answer().trim();
    let question = example.question.as_str();
    let text = rationale.to_text();

    let greedy = verifier
        .greedy_answer(&example.image, question, Some(&text))
        .map_err(tool_err)?;
    let build = |category, effective_answer: &str, scores| CategorizedExample {
        example_id: example.example_id.clone(),
        question: example.question.clone(),
        image: example.image.clone(),
        rationale: rationale.clone(),
        category,
        effective_answer: effective_answer.to_string(),
        scores,
    };

    if greedy.trim() != gold {
        let scores = Scores {
            greedy,
            logp_with: None,
            logp_without: None,
        };
        return Ok(build(Category::Irrelevant, NONE_ANSWER, scores));
    }

    let logp_with = verifier
        .answer_logprob(&example.image, question, gold, Some(&text))
        .map_err(tool_err)?;
    let logp_without = verifier
        .answer_logprob(&example.image, question, gold, None)
        .map_err(tool_err)?;
    let category = if cfg.is_useful(logp_with, logp_without) {
        Category::Useful
    } else {
        Category::RelevantNotUseful
    };
    let scores = Scores {
        greedy,
        logp_with: Some(logp_with),
        logp_without: Some(logp_without),
    };
    Ok(build(category, gold, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub n_none: usize,
    pub n_bad_r: usize,
    pub n_good_r: usize,
    pub n_none_kept: usize,
    pub seed: u64,
}

/// Number of `None` examples to keep.
pub fn none_target(n_bad_r: usize, n_good_r: usize) -> usize {
    n_bad_r.saturating_sub(n_good_r)
}

/// Keeps every useful and relevant-not-useful example and a seeded uniform
/// subsample of the irrelevant ones. Input order is preserved.
pub fn balance(categorized: Vec<CategorizedExample>, seed: u64) -> (Vec<CategorizedExample>, BalanceReport) {
    let none_idx: Vec<usize> = categorized
        .iter()
        .enumerate()
        .filter(|(_, c)| c.category == Category::Irrelevant)
        .map(|(i, _)| i)
        .collect();
    let count = |cat| categorized.iter().filter(|c| c.category == cat).count();
    let n_bad_r = count(Category::RelevantNotUseful);
    let n_good_r = count(Category::Useful);
    let keep_n = none_target(n_bad_r, n_good_r).min(none_idx.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, none_idx.len(), keep_n)
        .into_iter()
        .map(|i| none_idx[i])
        .collect();

    let report = BalanceReport {
        n_none: none_idx.len(),
        n_bad_r,
        n_good_r,
        n_none_kept: keep_n,
        seed,
    };
    let kept = categorized
        .into_iter()
        .enumerate()
        .filter(|(i, c)| c.category != Category::Irrelevant || chosen.contains(i))
        .map(|(_, c)| c)
        .collect();
    (kept, report)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::Rationale;

    /// Verifier replaying fixed scores.
    pub(crate) struct FixedVerifier {
        pub greedy: String,
        pub logp_with: f64,
        pub logp_without: f64,
    }

    impl VerifierClient for FixedVerifier {
        fn greedy_answer(&self, _: &ImageRef, _: &str, _: Option<&str>) -> Result<String, ToolError> {
            Ok(self.greedy.clone())
        }

        fn answer_logprob(&self, _: &ImageRef, _: &str, _: &str, r: Option<&str>) -> Result<f64, ToolError> {
            Ok(if r.is_some() { self.logp_with } else { self.logp_without })
        }
    }

    fn example(gold: &str) -> QAExample {
        QAExample {
            example_id: "e#c1".into(),
            image: ImageRef::new("e", 800, 400),
            question: "Which social media platform is most used in 2019?".into(),
            gold_answers: vec![gold.into(), "IG".into()],
            ocr_text: String::new(),
            ocr_boxes: None,
            structured_table: None,
            subset: None,
        }
    }

    fn run(greedy: &str, p_with: f64, p_without: f64, cfg: FilterConfig) -> CategorizedExample {
        let v = FixedVerifier {
            greedy: greedy.into(),
            logp_with: p_with.ln(),
            logp_without: p_without.ln(),
        };
        categorize(&example("Instagram"), &Rationale::evidence("r"), &v, &cfg).unwrap()
    }

    #[test]
    fn wrong_greedy_is_irrelevant() {
        let c = run("Paris", 0.9, 0.1, FilterConfig::default());
        assert_eq!(c.category, Category::Irrelevant);
        assert_eq!(c.effective_answer, "None");
        assert_eq!(c.scores.greedy, "Paris");
    }

    #[test]
    fn boost_decides_usefulness() {
        let c = run("Instagram", 0.5, 0.2, FilterConfig::default());
        assert_eq!((c.category, c.effective_answer.as_str()), (Category::Useful, "Instagram"));
        let c = run(" Instagram ", 0.3, 0.2, FilterConfig::default());
        assert_eq!((c.category, c.effective_answer.as_str()), (Category::RelevantNotUseful, "Instagram"));
    }

    #[test]
    fn greedy_match_is_case_sensitive() {
        assert_eq!(run("instagram", 0.9, 0.1, FilterConfig::default()).category, Category::Irrelevant);
    }

    #[test]
    fn log_space_variant() {
        let cfg = FilterConfig { boost_factor: 2.0, space: ScoreSpace::Log };
        // p_with >= p_without^2
        assert_eq!(run("Instagram", 0.05, 0.2, cfg).category, Category::Useful);
        assert_eq!(run("Instagram", 0.05, 0.3, cfg).category, Category::RelevantNotUseful);
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        assert!(FilterConfig { boost_factor: 1.0, space: ScoreSpace::Probability }.validate().is_err());
        assert!(FilterConfig { boost_factor: 0.5, space: ScoreSpace::Log }.validate().is_ok());
    }

    fn synthetic(n_none: usize, n_bad: usize, n_good: usize) -> Vec<CategorizedExample> {
        let mut out = vec![];
        let cats = [(Category::Irrelevant, n_none), (Category::RelevantNotUseful, n_bad), (Category::Useful, n_good)];
        for (cat, n) in cats {
            for i in 0..n {
                out.push(CategorizedExample {
                    example_id: format!("{cat:?}-{i}"),
                    question: "q".into(),
                    image: ImageRef::new("x", 10, 10),
                    rationale: Rationale::evidence("r"),
                    category: cat,
                    effective_answer: if cat == Category::Irrelevant { "None".into() } else { "a".into() },
                    scores: Scores { greedy: "a".into(), logp_with: None, logp_without: None },
                });
            }
        }
        out
    }

    #[test]
    fn balance_formula() {
        let (kept, report) = balance(synthetic(500, 100, 40), 1);
        assert_eq!(report.n_none_kept, 60);
        assert_eq!(kept.len(), 60 + 100 + 40);
        let (_, report) = balance(synthetic(500, 30, 50), 1);
        assert_eq!(report.n_none_kept, 0);
        let (kept, report) = balance(synthetic(25, 100, 40), 1);
        assert_eq!(report.n_none_kept, 25);
        assert_eq!(kept.iter().filter(|c| c.category == Category::Irrelevant).count(), 25);
    }

    #[test]
    fn balance_is_seeded() {
        let ids = |seed| -> Vec<String> { balance(synthetic(50, 20, 5), seed).0.into_iter().map(|c| c.example_id).collect() };
        assert_eq!(ids(3), ids(3));
        assert_ne!(ids(3), ids(4));
    }
}
