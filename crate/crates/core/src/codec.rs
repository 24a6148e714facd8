//! Decoder sequence encoding and parsing.
//!
//! A full target is `question <s> rationale <answer> answer`. Program
//! rationales fill the rationale slot with `table <program> program`.
//! Budgets are expressed in tokens of a pluggable [`TokenCounter`].

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{is_none_answer, Table, NONE_ANSWER};

pub const RATIONALE_SEP: &str = "<s>";
pub const ANSWER_SEP: &str = "<answer>";
pub const PROGRAM_SEP: &str = "<program>";

/// Decoder length budget of the student model.
pub const DECODER_BUDGET: usize = 128;
/// Tokens allowed before `<answer>`.
pub const PREFIX_BUDGET: usize = 108;
/// Tokens reserved for the answer.
pub const ANSWER_BUDGET: usize = 20;
/// Tokens allowed for the linearized table in a program rationale.
pub const TABLE_BUDGET: usize = 64;
/// Tokens reserved for the program.
pub const PROGRAM_BUDGET: usize = 44;

const CELL_SEP: &str = " | ";
const ROW_SEP: &str = " \n ";

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("decoded sequence has no <answer> marker")]
    NoAnswerMarker,
}

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` with at most `max` tokens.
    fn truncate<'a>(&self, text: &'a str, max: usize) -> &'a str;
}

/// Counts whitespace-separated words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate<'a>(&self, text: &'a str, max: usize) -> &'a str {
        if max == 0 {
            return "";
        }
        let mut seen = 0;
        let mut in_word = false;
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if in_word {
                    in_word = false;
                    if seen == max {
                        return &text[..i];
                    }
                }
            } else if !in_word {
                in_word = true;
                seen += 1;
            }
        }
        text
    }
}

/// Approximates subword tokenizers: one token per four characters, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharQuarterCounter;

impl TokenCounter for CharQuarterCounter {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }

    fn truncate<'a>(&self, text: &'a str, max: usize) -> &'a str {
        match text.char_indices().nth(max * 4) {
            Some((i, _)) => &text[..i],
            None => text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterKind {
    #[default]
    Whitespace,
    Char4,
}

impl CounterKind {
    pub fn build(self) -> Box<dyn TokenCounter> {
        match self {
            CounterKind::Whitespace => Box::new(WhitespaceCounter),
            CounterKind::Char4 => Box::new(CharQuarterCounter),
        }
    }
}

impl FromStr for CounterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" => Ok(CounterKind::Whitespace),
            "char4" => Ok(CounterKind::Char4),
            other => Err(format!("unknown token counter {other:?}")),
        }
    }
}

/// Replaces separator look-alikes so that parsing stays unambiguous.
fn escape(text: &str, seps: &[&str]) -> String {
    let mut out = text.to_string();
    for sep in seps {
        if out.contains(sep) {
            let inner = &sep[1..sep.len() - 1];
            out = out.replace(sep, &format!("\u{2039}{inner}\u{203a}"));
        }
    }
    out
}

fn escape_field(text: &str) -> String {
    escape(text.trim(), &[RATIONALE_SEP, ANSWER_SEP, PROGRAM_SEP])
}

/// Largest truncation of `text` for which `fits(candidate)` holds.
///
/// Relies on counts being monotone in the prefix length.
fn fit<'a>(counter: &dyn TokenCounter, text: &'a str, fits: impl Fn(&str) -> bool) -> &'a str {
    if fits(text) {
        return text;
    }
    let (mut lo, mut hi) = (0usize, counter.count(text));
    // invariant: truncate(lo) fits (or lo == 0), truncate(hi) does not
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(counter.truncate(text, mid).trim_end()) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    counter.truncate(text, lo).trim_end()
}

fn prefix_string(question: &str, rationale: Option<&str>) -> String {
    match rationale {
        Some(r) if !r.is_empty() => format!("{question} {RATIONALE_SEP} {r}"),
        Some(_) => format!("{question} {RATIONALE_SEP}"),
        None => question.to_string(),
    }
}

/// Builds `question [<s> rationale]` trimmed to `budget` tokens, cutting the
/// rationale tail first and the question tail only once the rationale is gone.
/// The budget covers the trailing space that precedes the next separator.
pub fn encode_prefix(
    question: &str,
    rationale: Option<&str>,
    budget: usize,
    counter: &dyn TokenCounter,
) -> String {
    let q = escape_field(question);
    let r = rationale.map(|r| escape(r.trim(), &[RATIONALE_SEP, ANSWER_SEP]));
    let fits = |s: &str| counter.count(&format!("{s} ")) <= budget;

    let full = prefix_string(&q, r.as_deref());
    if fits(&full) {
        return full;
    }
    if let Some(r) = r.as_deref() {
        let with_empty = prefix_string(&q, Some(""));
        if fits(&with_empty) {
            let kept = fit(counter, r, |cand| fits(&prefix_string(&q, Some(cand))));
            return prefix_string(&q, Some(kept));
        }
    }
    let has_r = r.is_some();
    let kept_q = fit(counter, &q, |cand| {
        fits(&prefix_string(cand, has_r.then_some("")))
    });
    let out = prefix_string(kept_q, has_r.then_some(""));
    if fits(&out) {
        out
    } else {
        // budget too small for even the separator
        String::new()
    }
}

/// Encodes a decoder target, enforcing the 108/20 token split.
pub fn encode_target(
    question: &str,
    rationale: Option<&str>,
    answer: &str,
    counter: &dyn TokenCounter,
) -> Result<String, CodecError> {
    let answer = encode_answer(answer, counter)?;
    let prefix = encode_prefix(question, rationale, PREFIX_BUDGET, counter);
    Ok(format!("{prefix} {ANSWER_SEP} {answer}"))
}

/// Escapes and truncates an answer so that ` answer` fits the answer budget.
pub fn encode_answer(answer: &str, counter: &dyn TokenCounter) -> Result<String, CodecError> {
    let a = escape_field(answer);
    if a.is_empty() {
        return Err(CodecError::EmptyAnswer);
    }
    let kept = fit(counter, &a, |cand| counter.count(&format!(" {cand}")) <= ANSWER_BUDGET);
    if kept.is_empty() {
        return Err(CodecError::EmptyAnswer);
    }
    Ok(kept.to_string())
}

fn linearize_rows(rows: &[Vec<String>]) -> String {
    rows.iter()
        .map(|row| {
            row.iter()
                .map(|c| escape_field(c))
                .collect::<Vec<_>>()
                .join(CELL_SEP)
        })
        .collect::<Vec<_>>()
        .join(ROW_SEP)
}

/// Row-major linearization of a table, untrimmed.
pub fn linearize_table(table: &Table) -> String {
    linearize_rows(table)
}

fn linearize_within(table: &Table, budget: usize, counter: &dyn TokenCounter) -> String {
    let fits = |s: &str| counter.count(s) <= budget;
    // drop whole trailing rows
    let mut rows = table.len();
    while rows > 0 && !fits(&linearize_rows(&table[..rows])) {
        rows -= 1;
    }
    if rows == table.len() || rows > 0 {
        return linearize_rows(&table[..rows]);
    }
    // the first row alone is too long: drop its trailing cells
    let Some(first) = table.first() else {
        return String::new();
    };
    let mut cells = first.len();
    while cells > 1 && !fits(&linearize_rows(&[first[..cells].to_vec()])) {
        cells -= 1;
    }
    let lin = linearize_rows(&[first[..cells].to_vec()]);
    if fits(&lin) {
        lin
    } else {
        fit(counter, &lin, fits).to_string()
    }
}

/// Encodes a table-program rationale as `table <program> program` with the
/// table held to 64 tokens and the program to 44.
pub fn encode_program_rationale(table: &Table, program_source: &str, counter: &dyn TokenCounter) -> String {
    let lin = linearize_within(table, TABLE_BUDGET, counter);
    let program = escape_field(program_source);
    let program = fit(counter, &program, |s| counter.count(s) <= PROGRAM_BUDGET);
    match (lin.is_empty(), program.is_empty()) {
        (true, true) => PROGRAM_SEP.to_string(),
        (true, false) => format!("{PROGRAM_SEP} {program}"),
        (false, true) => format!("{lin} {PROGRAM_SEP}"),
        (false, false) => format!("{lin} {PROGRAM_SEP} {program}"),
    }
}

/// Splits an encoded program rationale into its table and program segments.
pub fn split_program_rationale(rationale: &str) -> Option<(&str, &str)> {
    let pos = rationale.find(PROGRAM_SEP)?;
    Some((
        rationale[..pos].trim(),
        rationale[pos + PROGRAM_SEP.len()..].trim(),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedTarget {
    pub question: String,
    pub rationale: Option<String>,
    pub answer: String,
}

impl DecodedTarget {
    pub fn is_none(&self) -> bool {
        is_none_answer(&self.answer)
    }
}

/// Parses a decoded sequence. The answer follows the last `<answer>`; the
/// question ends at the first `<s>`.
pub fn parse_target(decoded: &str) -> Result<DecodedTarget, CodecError> {
    let pos = decoded.rfind(ANSWER_SEP).ok_or(CodecError::NoAnswerMarker)?;
    let mut answer = decoded[pos + ANSWER_SEP.len()..].trim().to_string();
    if answer.is_empty() {
        return Err(CodecError::EmptyAnswer);
    }
    if is_none_answer(&answer) {
        answer = NONE_ANSWER.to_string();
    }
    let head = &decoded[..pos];
    let (question, rationale) = match head.find(RATIONALE_SEP) {
        Some(s) => (
            head[..s].trim().to_string(),
            Some(head[s + RATIONALE_SEP.len()..].trim().to_string()),
        ),
        None => (head.trim().to_string(), None),
    };
    Ok(DecodedTarget {
        question,
        rationale,
        answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const WS: WhitespaceCounter = WhitespaceCounter;

    fn words(n: usize, stem: &str) -> String {
        (0..n).map(|i| format!("{stem}{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn basic_target() {
        assert_eq!(
            encode_target("What is X?", Some("evidence here"), "42", &WS).unwrap(),
            "What is X? <s> evidence here <answer> 42"
        );
    }

    #[test]
    fn question_only_target() {
        assert_eq!(encode_target("Q", None, "A", &WS).unwrap(), "Q <answer> A");
    }

    #[test]
    fn empty_answer() {
        assert_eq!(encode_target("Q", None, "  ", &WS), Err(CodecError::EmptyAnswer));
    }

    #[test]
    fn long_rationale_trimmed_first() {
        let q = "what is the share of instagram users";
        let r = words(500, "w");
        let out = encode_target(q, Some(&r), "42", &WS).unwrap();
        let prefix = &out[..out.find(ANSWER_SEP).unwrap()];
        assert_eq!(WS.count(prefix), 108);
        let parsed = parse_target(&out).unwrap();
        assert_eq!(parsed.question, q);
        // 7 question words + <s> + 100 rationale words
        assert_eq!(parsed.rationale.unwrap(), words(100, "w"));
    }

    #[test]
    fn long_question_trimmed_after_rationale() {
        let q = words(200, "q");
        let out = encode_target(&q, Some("some rationale"), "a", &WS).unwrap();
        let parsed = parse_target(&out).unwrap();
        assert_eq!(parsed.rationale.as_deref(), Some(""));
        assert_eq!(parsed.question, words(107, "q"));
    }

    #[test]
    fn answer_truncated_to_budget() {
        let a = words(30, "a");
        let out = encode_target("q", None, &a, &WS).unwrap();
        assert_eq!(parse_target(&out).unwrap().answer, words(20, "a"));
    }

    #[test]
    fn separators_in_fields_are_escaped() {
        let out = encode_target("is <s> a tag?", Some("r <answer> x"), "<answer>", &WS).unwrap();
        let parsed = parse_target(&out).unwrap();
        assert_eq!(parsed.question, "is \u{2039}s\u{203a} a tag?");
        assert_eq!(parsed.rationale.as_deref(), Some("r \u{2039}answer\u{203a} x"));
        assert_eq!(parsed.answer, "\u{2039}answer\u{203a}");
    }

    #[test]
    fn program_rationale_linearization() {
        let table = vec![vec!["a".to_string(), "b".into()], vec!["c".into(), "d".into()]];
        assert_eq!(
            encode_program_rationale(&table, "Div(25, 5)", &WS),
            "a | b \n c | d <program> Div(25, 5)"
        );
        assert_eq!(encode_program_rationale(&vec![], "Div(25, 5)", &WS), "<program> Div(25, 5)");
    }

    #[test]
    fn long_table_drops_rows() {
        // each row: "k | v" = 3 words, rows joined by "\n" (whitespace)
        let table: Table = (0..50).map(|i| vec![format!("k{i}"), format!("{i}")]).collect();
        let out = encode_program_rationale(&table, "Sum(1, 2)", &WS);
        let (lin, prog) = split_program_rationale(&out).unwrap();
        assert_eq!(prog, "Sum(1, 2)");
        // 21 rows = 63 words fit, 22 rows = 66 do not
        assert_eq!(WS.count(lin), 63);
        assert!(lin.ends_with("k20 | 20"));
    }

    #[test]
    fn wide_first_row_drops_cells() {
        let table: Table = vec![(0..40).map(|i| format!("c{i}")).collect()];
        let out = encode_program_rationale(&table, "Find(x)", &WS);
        let (lin, _) = split_program_rationale(&out).unwrap();
        assert!(WS.count(lin) <= TABLE_BUDGET);
        assert!(lin.starts_with("c0 | c1"));
    }

    #[test]
    fn parse_variants() {
        let t = parse_target("Q <s> R <answer> A").unwrap();
        assert_eq!((t.question.as_str(), t.rationale.as_deref(), t.answer.as_str()), ("Q", Some("R"), "A"));
        let t = parse_target("Q <answer> None").unwrap();
        assert!(t.is_none());
        assert_eq!(t.rationale, None);
        assert_eq!(parse_target("garbage with no marker"), Err(CodecError::NoAnswerMarker));
        // last <answer> wins
        assert_eq!(parse_target("Q <answer> x <answer> y").unwrap().answer, "y");
    }

    #[test]
    fn whitespace_truncate_is_prefix() {
        assert_eq!(WS.truncate("  a  b c ", 2), "  a  b");
        assert_eq!(WS.truncate("a b", 5), "a b");
        assert_eq!(WS.truncate("a b", 0), "");
        assert_eq!(CharQuarterCounter.truncate("abcdefghij", 2), "abcdefgh");
        assert_eq!(CharQuarterCounter.count("abcdefghi"), 3);
    }

    proptest! {
        #[test]
        fn truncate_respects_max(t in "\\PC{0,80}", m in 0usize..30) {
            for c in [&WhitespaceCounter as &dyn TokenCounter, &CharQuarterCounter] {
                let cut = c.truncate(&t, m);
                prop_assert!(c.count(cut) <= m);
                prop_assert!(t.starts_with(cut));
            }
        }

        #[test]
        fn round_trip_without_trimming(
            q in "[a-z]{1,8}( [a-z?]{1,8}){0,8}",
            r in proptest::option::of("[a-z0-9]{1,8}( [a-z0-9.]{1,8}){0,20}"),
            a in "[A-Za-z0-9]{1,10}",
        ) {
            let out = encode_target(&q, r.as_deref(), &a, &WS).unwrap();
            let parsed = parse_target(&out).unwrap();
            prop_assert_eq!(parsed.question, q);
            prop_assert_eq!(parsed.rationale, r);
            prop_assert_eq!(parsed.answer, a);
        }
    }
}
