use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ToolError;

/// Few-shot count expected for summarizer templates.
pub const SUMMARIZER_SHOTS: u32 = 5;
/// Few-shot count expected for programmer templates.
pub const PROGRAMMER_SHOTS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Summarizer,
    Programmer,
}

impl TemplateKind {
    pub fn expected_shots(self) -> u32 {
        match self {
            TemplateKind::Summarizer => SUMMARIZER_SHOTS,
            TemplateKind::Programmer => PROGRAMMER_SHOTS,
        }
    }
}

/// Operator-supplied prompt with `{question}`, `{answer}`, `{ocr}` and
/// `{table}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub kind: TemplateKind,
    pub shot_count: u32,
    pub body: String,
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolError::Template(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ToolError::Template(format!("{}: {e}", path.display())))
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut names = Vec::new();
        for (_, name, _) in scan(&self.body) {
            if !names.contains(&name) {
                names.push(name);
            }
        }
        names
    }

    /// Shot-count mismatch, if any.
    pub fn shot_count_problem(&self) -> Option<String> {
        let want = self.kind.expected_shots();
        (self.shot_count != want).then(|| {
            format!(
                "{:?} template {:?} has shot_count {} (expected {want})",
                self.kind, self.name, self.shot_count
            )
        })
    }
}

/// Yields `(start, name, end)` for every `{name}` with a lowercase identifier.
fn scan(body: &str) -> impl Iterator<Item = (usize, &str, usize)> {
    let bytes = body.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if bytes[i] == b'{' {
                let len = bytes[i + 1..]
                    .iter()
                    .take_while(|b| b.is_ascii_lowercase() || **b == b'_')
                    .count();
                let close = i + 1 + len;
                if len > 0 && bytes.get(close) == Some(&b'}') {
                    let hit = (i, &body[i + 1..close], close + 1);
                    i = close + 1;
                    return Some(hit);
                }
            }
            i += 1;
        }
        None
    })
}

/// Substitutes every placeholder in one pass; bound values are inserted verbatim.
pub fn render_prompt(template: &PromptTemplate, bindings: &BTreeMap<&str, String>) -> Result<String, ToolError> {
    let body = &template.body;
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for (start, name, end) in scan(body) {
        let value = bindings
            .get(name)
            .ok_or_else(|| ToolError::MissingBinding(name.to_string()))?;
        out.push_str(&body[last..start]);
        out.push_str(value);
        last = end;
    }
    out.push_str(&body[last..]);
    Ok(out)
}
