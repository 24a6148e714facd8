//! The flat program language used in table-program rationales.
//!
//! A program is a single call `Op(arg, ...)` over literal arguments:
//!
//! | op | args | result |
//! |----|------|--------|
//! | `Div`, `Mul`, `Diff` | 2 numbers | number |
//! | `Avg`, `Sum` | 1 or more numbers | number |
//! | `Greater`, `Less` | 2 numbers | `Yes` / `No` (strict) |
//! | `Find` | 1 text | passthrough, nothing is computed |
//!
//! Numbers may carry a trailing `%` (stripped, not rescaled) and thousands
//! separators. A comma between digits followed by exactly three digits may
//! be either; the parser keeps the reading that type-checks and reports a
//! parse error when more than one does.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DslError {
    #[error("parse error at {position}: expected {expected}")]
    Parse { position: usize, expected: String },
    #[error("{op} takes {expected} arguments, got {got}")]
    Arity { op: Op, expected: &'static str, got: usize },
    #[error("{op} argument {index} has the wrong type")]
    Type { op: Op, index: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("value is not finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Div,
    Mul,
    Avg,
    Sum,
    Diff,
    Greater,
    Less,
    Find,
}

impl Op {
    pub const ALL: [Op; 8] = [
        Op::Div,
        Op::Mul,
        Op::Avg,
        Op::Sum,
        Op::Diff,
        Op::Greater,
        Op::Less,
        Op::Find,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::Div => "Div",
            Op::Mul => "Mul",
            Op::Avg => "Avg",
            Op::Sum => "Sum",
            Op::Diff => "Diff",
            Op::Greater => "Greater",
            Op::Less => "Less",
            Op::Find => "Find",
        }
    }

    fn is_binary(self) -> bool {
        matches!(self, Op::Div | Op::Mul | Op::Diff | Op::Greater | Op::Less)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Op {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Op::ALL.into_iter().find(|op| op.name() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arg {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    op: Op,
    args: Vec<Arg>,
}

impl Program {
    /// Builds a program, checking arity and argument types.
    pub fn new(op: Op, args: Vec<Arg>) -> Result<Self, DslError> {
        check(op, &args)?;
        Ok(Program { op, args })
    }

    pub fn op(&self) -> Op {
        self.op
    }

    pub fn args(&self) -> &[Arg] {
        &self.args
    }

    fn numbers(&self) -> Vec<f64> {
        self.args
            .iter()
            .filter_map(|a| match a {
                Arg::Number(x) => Some(*x),
                Arg::Text(_) => None,
            })
            .collect()
    }
}

fn check(op: Op, args: &[Arg]) -> Result<(), DslError> {
    let arity_ok = match op {
        Op::Find => args.len() == 1,
        _ if op.is_binary() => args.len() == 2,
        _ => !args.is_empty(),
    };
    if !arity_ok {
        let expected = match op {
            Op::Find => "exactly 1",
            Op::Avg | Op::Sum => "at least 1",
            _ => "exactly 2",
        };
        return Err(DslError::Arity {
            op,
            expected,
            got: args.len(),
        });
    }
    for (index, arg) in args.iter().enumerate() {
        let ok = match (op, arg) {
            (Op::Find, Arg::Text(t)) => !t.is_empty() && t.trim() == t,
            (Op::Find, Arg::Number(_)) => false,
            (_, Arg::Number(x)) => x.is_finite(),
            (_, Arg::Text(_)) => false,
        };
        if !ok {
            return Err(DslError::Type { op, index });
        }
    }
    Ok(())
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.op)?;
        for (i, arg) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match arg {
                Arg::Number(x) => write!(f, "{x}")?,
                Arg::Text(t) => f.write_str(t)?,
            }
        }
        f.write_str(")")
    }
}

/// Canonical source form, `Op(a1, a2, ...)`.
pub fn print(program: &Program) -> String {
    program.to_string()
}

fn parse_err(position: usize, expected: impl Into<String>) -> DslError {
    DslError::Parse {
        position,
        expected: expected.into(),
    }
}

/// Parses a numeric literal: sign, digits with optional `,ddd` groups,
/// optional fraction, optional trailing `%`.
fn parse_number(text: &str) -> Option<f64> {
    let t = text.trim();
    let t = t.strip_suffix('%').map(str::trim_end).unwrap_or(t);
    let unsigned = t.strip_prefix(['-', '+']).unwrap_or(t);
    let (int_part, frac_part) = match unsigned.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (unsigned, None),
    };
    if let Some(f) = frac_part {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    if int_part.is_empty() {
        frac_part?;
    } else {
        let mut groups = int_part.split(',');
        let head = groups.next()?;
        let grouped = int_part.contains(',');
        if head.is_empty() || !head.bytes().all(|b| b.is_ascii_digit()) || (grouped && head.len() > 3) {
            return None;
        }
        if !groups.all(|g| g.len() == 3 && g.bytes().all(|b| b.is_ascii_digit())) {
            return None;
        }
    }
    let cleaned: String = t.chars().filter(|&c| c != ',').collect();
    cleaned.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Commas that may be thousands separators: digit before, exactly three digits after.
fn ambiguous_commas(body: &[u8]) -> Vec<usize> {
    (1..body.len())
        .filter(|&i| {
            body[i] == b','
                && body[i - 1].is_ascii_digit()
                && body.len() >= i + 4
                && body[i + 1..i + 4].iter().all(u8::is_ascii_digit)
                && body.get(i + 4).is_none_or(|b| !b.is_ascii_digit())
        })
        .collect()
}

fn build_args(op: Op, body: &str, offset: usize, separators: &[usize]) -> Result<Vec<Arg>, DslError> {
    let mut args = Vec::with_capacity(separators.len() + 1);
    let mut from = 0;
    for &cut in separators.iter().chain(std::iter::once(&body.len())) {
        let piece = &body[from..cut];
        if piece.trim().is_empty() {
            return Err(parse_err(offset + from, "argument"));
        }
        match parse_number(piece) {
            Some(x) => args.push(Arg::Number(x)),
            None => args.push(Arg::Text(piece.trim().to_string())),
        }
        from = cut + 1;
    }
    check(op, &args)?;
    Ok(args)
}

const MAX_AMBIGUOUS: usize = 10;

/// Parses program source.
pub fn parse(source: &str) -> Result<Program, DslError> {
    let lead = source.len() - source.trim_start().len();
    let s = source.trim();
    let name_len = s.bytes().take_while(u8::is_ascii_alphabetic).count();
    let op: Op = s[..name_len]
        .parse()
        .map_err(|_| parse_err(lead, "one of Div, Mul, Avg, Sum, Diff, Greater, Less, Find"))?;
    let rest = &s[name_len..];
    let open_pad = rest.len() - rest.trim_start().len();
    if !rest.trim_start().starts_with('(') {
        return Err(parse_err(lead + name_len + open_pad, "'('"));
    }
    if !s.ends_with(')') || s.len() < name_len + open_pad + 2 {
        return Err(parse_err(lead + s.len(), "')'"));
    }
    let body_start = name_len + open_pad + 1;
    let body = &s[body_start..s.len() - 1];
    let offset = lead + body_start;

    if op == Op::Find {
        let text = body.trim();
        let args = if text.is_empty() {
            vec![]
        } else {
            vec![Arg::Text(text.to_string())]
        };
        check(op, &args)?;
        return Ok(Program { op, args });
    }

    if body.trim().is_empty() {
        check(op, &[])?;
    }
    if let Some(pos) = body.find(['(', ')']) {
        return Err(parse_err(offset + pos, "literal argument"));
    }
    let bytes = body.as_bytes();
    let candidates = ambiguous_commas(bytes);
    let plain: Vec<usize> = (0..bytes.len())
        .filter(|i| bytes[*i] == b',' && !candidates.contains(i))
        .collect();
    if candidates.len() > MAX_AMBIGUOUS {
        return Err(parse_err(offset + candidates[0], "fewer ambiguous commas"));
    }

    let mut first_error = None;
    let mut readings: Vec<Vec<Arg>> = Vec::new();
    // bit set = that comma separates arguments
    for mask in (0..1u32 << candidates.len()).rev() {
        let mut seps: Vec<usize> = plain.clone();
        seps.extend(
            candidates
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, &i)| i),
        );
        seps.sort_unstable();
        match build_args(op, body, offset, &seps) {
            Ok(args) => {
                if !readings.contains(&args) {
                    readings.push(args);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    match readings.len() {
        1 => Ok(Program {
            op,
            args: readings.pop().unwrap(),
        }),
        0 => Err(first_error.expect("at least one reading is tried")),
        _ => Err(parse_err(
            offset + candidates[0],
            "unambiguous ',' (use ', ' between arguments)",
        )),
    }
}

impl FromStr for Program {
    type Err = DslError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExecResult {
    Numeric(f64),
    Boolean(bool),
    /// `Find` computes nothing; the caller keeps the model's answer.
    Passthrough,
}

impl ExecResult {
    /// Answer string for results that replace a model prediction.
    pub fn render(&self) -> Option<Result<String, DslError>> {
        match self {
            ExecResult::Numeric(x) => Some(render_numeric(*x)),
            ExecResult::Boolean(true) => Some(Ok("Yes".to_string())),
            ExecResult::Boolean(false) => Some(Ok("No".to_string())),
            ExecResult::Passthrough => None,
        }
    }
}

fn sum(xs: &[f64]) -> f64 {
    xs.iter().sum()
}

/// Runs a program.
pub fn execute(program: &Program) -> Result<ExecResult, DslError> {
    let xs = program.numbers();
    let result = match program.op {
        Op::Find => ExecResult::Passthrough,
        Op::Div => {
            if xs[1] == 0.0 {
                return Err(DslError::DivisionByZero);
            }
            ExecResult::Numeric(xs[0] / xs[1])
        }
        Op::Mul => ExecResult::Numeric(xs[0] * xs[1]),
        Op::Diff => ExecResult::Numeric(xs[0] - xs[1]),
        Op::Sum => ExecResult::Numeric(sum(&xs)),
        Op::Avg => ExecResult::Numeric(sum(&xs) / xs.len() as f64),
        Op::Greater => ExecResult::Boolean(xs[0] > xs[1]),
        Op::Less => ExecResult::Boolean(xs[0] < xs[1]),
    };
    Ok(result)
}

/// Minimal decimal form: integers without a point, otherwise at most six
/// fractional digits with trailing zeros removed.
pub fn render_numeric(x: f64) -> Result<String, DslError> {
    if !x.is_finite() {
        return Err(DslError::NonFinite);
    }
    let mut s = if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        let s = format!("{x:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    };
    if s == "-0" {
        s = "0".to_string();
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nums(xs: &[f64]) -> Vec<Arg> {
        xs.iter().map(|&x| Arg::Number(x)).collect()
    }

    #[test]
    fn parses_minimal_call() {
        assert_eq!(parse("Div(25, 5)").unwrap(), Program::new(Op::Div, nums(&[25.0, 5.0])).unwrap());
        assert_eq!(parse("  Avg(1, 2, 3, 6) ").unwrap().args(), &nums(&[1.0, 2.0, 3.0, 6.0])[..]);
    }

    #[test]
    fn rejects_unknown_op() {
        assert!(matches!(parse("Foo(1, 2)"), Err(DslError::Parse { position: 0, .. })));
        assert!(matches!(parse("div(1, 2)"), Err(DslError::Parse { .. })));
    }

    #[test]
    fn arity_and_type_errors() {
        assert!(matches!(parse("Greater(5)"), Err(DslError::Arity { op: Op::Greater, got: 1, .. })));
        assert!(matches!(parse("Sum()"), Err(DslError::Arity { op: Op::Sum, got: 0, .. })));
        assert!(matches!(parse("Find()"), Err(DslError::Arity { op: Op::Find, got: 0, .. })));
        assert!(matches!(parse("Div(5, apples)"), Err(DslError::Type { op: Op::Div, index: 1 })));
        assert!(matches!(parse("Div(5,)"), Err(DslError::Parse { .. })));
        assert!(matches!(parse("Div(5, 1"), Err(DslError::Parse { .. })));
        assert!(matches!(parse("Sum(Div(1, 2))"), Err(DslError::Parse { .. })));
    }

    #[test]
    fn percent_and_sign() {
        assert_eq!(parse("Diff(25%, -3.5)").unwrap().args(), &nums(&[25.0, -3.5])[..]);
    }

    #[test]
    fn thousands_separators() {
        // binary op: only the thousands reading has two arguments
        assert_eq!(parse("Diff(1,234, 5)").unwrap().args(), &nums(&[1234.0, 5.0])[..]);
        // binary op: only the separator reading has two arguments
        assert_eq!(parse("Div(1,234)").unwrap().args(), &nums(&[1.0, 234.0])[..]);
        assert!(matches!(parse("Sum(1,234,567.5, 2)"), Err(DslError::Parse { .. })));
        assert!(matches!(parse("Sum(1,234)"), Err(DslError::Parse { .. })));
        // four digits after the comma: plain separator
        assert_eq!(parse("Sum(1,2345)").unwrap().args(), &nums(&[1.0, 2345.0])[..]);
        assert_eq!(parse("Mul(12, 1,000)").unwrap().args(), &nums(&[12.0, 1000.0])[..]);
    }

    #[test]
    fn find_takes_raw_text() {
        let p = parse("Find(Paris, France)").unwrap();
        assert_eq!(p.args(), &[Arg::Text("Paris, France".into())]);
        assert_eq!(execute(&p).unwrap(), ExecResult::Passthrough);
        assert_eq!(parse("Find(2019)").unwrap().args(), &[Arg::Text("2019".into())]);
    }

    #[test]
    fn executes() {
        let run = |s: &str| execute(&parse(s).unwrap());
        assert_eq!(run("Div(25,5)").unwrap(), ExecResult::Numeric(5.0));
        assert_eq!(run("Avg(2, 4)").unwrap(), ExecResult::Numeric(3.0));
        assert_eq!(run("Greater(10, 2)").unwrap(), ExecResult::Boolean(true));
        assert_eq!(run("Greater(2, 2)").unwrap(), ExecResult::Boolean(false));
        assert_eq!(run("Less(2, 2)").unwrap(), ExecResult::Boolean(false));
        assert_eq!(run("Div(1, 0)"), Err(DslError::DivisionByZero));
    }

    #[test]
    fn prints_canonically() {
        let p = Program::new(Op::Div, nums(&[25.0, 5.0])).unwrap();
        assert_eq!(print(&p), "Div(25, 5)");
        assert_eq!(print(&Program::new(Op::Sum, nums(&[1.50])).unwrap()), "Sum(1.5)");
        assert_eq!(print(&Program::new(Op::Diff, nums(&[-0.25, 1e21])).unwrap()), "Diff(-0.25, 1000000000000000000000)");
    }

    #[test]
    fn renders_numbers() {
        assert_eq!(render_numeric(5.0).unwrap(), "5");
        assert_eq!(render_numeric(3.1400001).unwrap(), "3.14");
        assert_eq!(render_numeric(0.333333333).unwrap(), "0.333333");
        assert_eq!(render_numeric(-2.5).unwrap(), "-2.5");
        assert_eq!(render_numeric(-0.0000001).unwrap(), "0");
        assert_eq!(render_numeric(1.9999999).unwrap(), "2");
        assert_eq!(render_numeric(f64::NAN), Err(DslError::NonFinite));
        assert_eq!(render_numeric(f64::INFINITY), Err(DslError::NonFinite));
    }

    pub(crate) fn arb_program() -> impl Strategy<Value = Program> {
        let number = prop_oneof![
            (-1_000_000i64..1_000_000).prop_map(|x| x as f64),
            (-1e6f64..1e6),
            (0u32..10_000).prop_map(|x| x as f64 / 100.0),
        ];
        let numeric = (
            prop::sample::select(vec![Op::Div, Op::Mul, Op::Diff, Op::Greater, Op::Less, Op::Avg, Op::Sum]),
            prop::collection::vec(number, 1..8),
        )
            .prop_filter_map("arity", |(op, mut xs)| {
                if op.is_binary() {
                    if xs.len() < 2 {
                        return None;
                    }
                    xs.truncate(2);
                }
                Program::new(op, nums(&xs)).ok()
            });
        let find = "[A-Za-z0-9][A-Za-z0-9 ,.%()-]{0,20}[A-Za-z0-9)]"
            .prop_filter_map("text", |t| Program::new(Op::Find, vec![Arg::Text(t)]).ok());
        prop_oneof![4 => numeric, 1 => find]
    }

    proptest! {
        #[test]
        fn parse_print_identity(p in arb_program()) {
            prop_assert_eq!(parse(&print(&p)).unwrap(), p);
        }

        #[test]
        fn avg_is_sum_over_len(xs in prop::collection::vec(-1e9f64..1e9, 1..10)) {
            let avg = execute(&Program::new(Op::Avg, nums(&xs)).unwrap()).unwrap();
            let total = execute(&Program::new(Op::Sum, nums(&xs)).unwrap()).unwrap();
            match (avg, total) {
                (ExecResult::Numeric(a), ExecResult::Numeric(s)) => prop_assert_eq!(a, s / xs.len() as f64),
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn greater_mirrors_less(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let g = execute(&Program::new(Op::Greater, nums(&[a, b])).unwrap()).unwrap();
            let l = execute(&Program::new(Op::Less, nums(&[b, a])).unwrap()).unwrap();
            prop_assert_eq!(g, l);
        }

        #[test]
        fn execute_total_except_div_zero(p in arb_program()) {
            match execute(&p) {
                Ok(_) => {}
                Err(DslError::DivisionByZero) => prop_assert_eq!(p.op(), Op::Div),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
