use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::codec::CounterKind;
use crate::crop::CropMode;
use crate::filter::{FilterConfig, ScoreSpace};
use crate::model::TaskKind;
use crate::tasks::{FOLDS_PER_SUBSET, STUDENT_SAMPLES};
use crate::tools::{Endpoints, Flow, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolMode {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsConfig {
    pub mode: ToolMode,
    /// Mock fixture file; optional, mocks fall back to computed replies.
    pub fixtures: Option<PathBuf>,
    pub endpoints: Endpoints,
    /// Environment variable holding the bearer token for remote tools.
    pub api_key_env: Option<String>,
    pub retry: RetryPolicy,
    pub program_attempts: u32,
    pub programmer_temperature: f64,
}

impl Default for ToolsConfig {
    fn default() -> Self {
        ToolsConfig {
            mode: ToolMode::Mock,
            fixtures: None,
            endpoints: Endpoints::default(),
            api_key_env: None,
            retry: RetryPolicy::default(),
            program_attempts: 3,
            programmer_temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePaths {
    pub summarizer: PathBuf,
    pub programmer: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub boost_factor: f64,
    pub space: ScoreSpace,
    /// Also categorize the uncropped images (off: only crops feed QRACI/APRCI).
    pub whole_images: bool,
}

impl Default for FilterSection {
    fn default() -> Self {
        let d = FilterConfig::default();
        FilterSection {
            boost_factor: d.boost_factor,
            space: d.space,
            whole_images: false,
        }
    }
}

impl FilterSection {
    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            boost_factor: self.boost_factor,
            space: self.space,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_concurrency() -> usize {
    4
}

fn default_tasks() -> Vec<String> {
    TaskKind::ALL.iter().map(|t| t.slug().to_string()).collect()
}

fn default_folds() -> usize {
    FOLDS_PER_SUBSET
}

fn default_samples() -> usize {
    STUDENT_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// JSONL file of QA examples.
    pub examples: PathBuf,
    #[serde(default)]
    pub flow: Flow,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub crop_mode: CropMode,
    #[serde(default)]
    pub counter: CounterKind,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<String>,
    #[serde(default = "default_folds")]
    pub folds_per_subset: usize,
    #[serde(default = "default_samples")]
    pub student_samples: usize,
    #[serde(default)]
    pub tools: ToolsConfig,
    pub templates: TemplatePaths,
    #[serde(default)]
    pub filter: FilterSection,
}

impl PipelineConfig {
    /// Reads a TOML config. `${NAME}` in string values is replaced by the
    /// environment variable `NAME`; relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let base = std::fs::canonicalize(dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?;
        Self::from_toml(&text, &base, &|name| std::env::var(name).ok())
    }

    pub fn from_toml(text: &str, base: &Path, env: &dyn Fn(&str) -> Option<String>) -> Result<Self, PipelineError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        interpolate(&mut value, env)?;
        let mut cfg: PipelineConfig = value.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.task_kinds()?;
        if cfg.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be at least 1".into()));
        }
        cfg.filter
            .filter_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.examples);
        fix(&mut self.output_dir);
        fix(&mut self.templates.summarizer);
        fix(&mut self.templates.programmer);
        if let Some(p) = self.tools.fixtures.as_mut() {
            fix(p);
        }
    }

    pub fn task_kinds(&self) -> Result<Vec<TaskKind>, PipelineError> {
        let mut kinds = Vec::new();
        for name in &self.tasks {
            let kind: TaskKind = name.parse().map_err(PipelineError::Config)?;
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        Ok(kinds)
    }
}

fn interpolate(value: &mut toml::Value, env: &dyn Fn(&str) -> Option<String>) -> Result<(), PipelineError> {
    match value {
        toml::Value::String(s) => *s = expand(s, env)?,
        toml::Value::Array(items) => {
            for item in items {
                interpolate(item, env)?;
            }
        }
        toml::Value::Table(table) => {
            for (_, item) in table.iter_mut() {
                interpolate(item, env)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn expand(s: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| PipelineError::Config(format!("unterminated ${{ in {s:?}")))?;
        let name = &after[..end];
        let value = env(name).ok_or_else(|| PipelineError::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
examples = "data/examples.jsonl"
output_dir = "${OUT}/run"

[templates]
summarizer = "t/s.toml"
programmer = "/abs/p.toml"
"#;

    fn env(name: &str) -> Option<String> {
        (name == "OUT").then(|| "/tmp/x".to_string())
    }

    #[test]
    fn defaults_and_paths() {
        let cfg = PipelineConfig::from_toml(MINIMAL, Path::new("/cfg"), &env).unwrap();
        assert_eq!(cfg.examples, PathBuf::from("/cfg/data/examples.jsonl"));
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x/run"));
        assert_eq!(cfg.templates.programmer, PathBuf::from("/abs/p.toml"));
        assert_eq!(cfg.flow, Flow::TextEvidence);
        assert_eq!(cfg.task_kinds().unwrap(), TaskKind::ALL.to_vec());
        assert_eq!(cfg.filter.filter_config(), FilterConfig::default());
        assert_eq!(cfg.tools.mode, ToolMode::Mock);
    }

    #[test]
    fn missing_env_and_bad_values() {
        let err = PipelineConfig::from_toml(MINIMAL, Path::new("/"), &|_| None).unwrap_err();
        assert!(err.to_string().contains("OUT"));
        let bad = format!("{MINIMAL}\n[filter]\nboost_factor = 0.5\n");
        assert!(PipelineConfig::from_toml(&bad, Path::new("/"), &env).is_err());
        let bad = MINIMAL.replace("examples =", "tasks = [\"qra\", \"xyz\"]\nexamples =");
        assert!(PipelineConfig::from_toml(&bad, Path::new("/"), &env).is_err());
        let bad = MINIMAL.replace("examples =", "colour = 1\nexamples =");
        assert!(PipelineConfig::from_toml(&bad, Path::new("/"), &env).is_err());
    }
}
