//! Inputs shared by the benchmarks.

use rd_core::model::Table;

/// A `rows` x 4 numeric table shaped like a small chart.
pub fn chart_table(rows: usize) -> Table {
    let mut t = vec![vec!["Year".to_string(), "Sales".into(), "Cost".into(), "Share".into()]];
    for r in 0..rows {
        t.push(vec![
            (2000 + r).to_string(),
            format!("{}", 100 + r * 7),
            format!("{}.5", 40 + r * 3),
            format!("{}%", (r * 13) % 100),
        ]);
    }
    t
}

/// Tall image sizes, width 800, height from 2x to 3x.
pub fn tall_sizes(n: usize) -> Vec<(i64, i64)> {
    (0..n).map(|i| (1600 + (i as i64 * 97) % 801, 800)).collect()
}

pub const QUESTION: &str = "Which social media platform is used by 72% of the respondents in 2019?";

pub fn long_rationale(words: usize) -> String {
    (0..words).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}
