//! Workflow generators behind a common interface.
//!
//! The oracle generator stands in for a fine-tuned LLM: it reads the prompt,
//! keeps the suggested (or common) steps whose name appears as a contiguous
//! phrase in the query, in query order, and picks a trigger by keyword. It
//! never emits a name it was not shown, except for the optional template
//! table fallback used to model generation without suggestions.
//!
//! The remote generator speaks a minimal completion protocol:
//! `POST {endpoint}/v1/complete` with `{"prompt", "max_tokens", "greedy": true}`,
//! answered by `{"text"}`.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{parse_workflow, Catalog, MalformedDocument, StepCategory, ValidationReport, WorkflowDocument, WorkflowStep};
use crate::lexical::tokenize;
use crate::pipeline::{parse_prompt, Prompt};

/// Query keyword → trigger step name.
pub const TRIGGER_KEYWORDS: [(&str, &str); 3] = [("daily", "daily"), ("created", "record_created"), ("updated", "record_updated")];

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("generator unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("generator timed out after {0:?}")]
    RemoteTimeout(Duration),
    #[error("generated text is not a workflow document: {source}")]
    MalformedDocument {
        raw: String,
        #[source]
        source: MalformedDocument,
    },
    #[error("prompt does not follow the template")]
    InvalidPrompt,
    #[error("invalid generator binding: {0}")]
    InvalidBinding(String),
}

impl GenerateError {
    /// Raw generator output, when there was any.
    pub fn raw_text(&self) -> Option<&str> {
        match self {
            Self::MalformedDocument { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

pub trait Generator: Send + Sync {
    /// Raw completion text for `prompt`, decoded greedily.
    fn complete(&self, prompt: &Prompt) -> Result<String, GenerateError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub document: WorkflowDocument,
    pub report: ValidationReport,
    pub raw: String,
}

/// Completes `prompt` and validates the result against `catalog`.
pub fn generate(generator: &dyn Generator, prompt: &Prompt, catalog: &Catalog) -> Result<Generation, GenerateError> {
    let raw = generator.complete(prompt)?;
    match parse_workflow(&raw, catalog) {
        Ok((document, report)) => Ok(Generation { document, report, raw }),
        Err(source) => Err(GenerateError::MalformedDocument { raw, source }),
    }
}

#[derive(Debug, Clone)]
pub struct OracleGenerator {
    catalog: Arc<Catalog>,
    table_fallback: bool,
}

impl OracleGenerator {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        Self {
            catalog,
            table_fallback: false,
        }
    }

    /// Invent `<word>_table` from the query when no table is suggested.
    pub fn with_table_fallback(mut self, enabled: bool) -> Self {
        self.table_fallback = enabled;
        self
    }

    pub fn build(&self, prompt: &Prompt) -> Result<WorkflowDocument, GenerateError> {
        let parsed = parse_prompt(prompt).ok_or(GenerateError::InvalidPrompt)?;
        let query = tokenize(&parsed.query).into_inner();

        let candidates = parsed.steps.iter().chain(self.catalog.common_steps()).filter(|name| {
            self.catalog
                .step(name)
                .is_none_or(|d| d.category != StepCategory::Trigger)
        });
        // (position, span length, name); longer phrases win overlapping spans
        let mut hits: Vec<(usize, usize, &str)> = Vec::new();
        for name in candidates {
            let phrase = tokenize(name).into_inner();
            if let Some(pos) = find_phrase(&query, &phrase) {
                hits.push((pos, phrase.len(), name));
            }
        }
        hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut steps = Vec::new();
        let mut covered_until = 0;
        for (pos, len, name) in hits {
            if pos < covered_until || steps.iter().any(|s: &WorkflowStep| s.name == name) {
                continue;
            }
            covered_until = pos + len;
            steps.push(WorkflowStep::new(name, steps.len() as u32 + 1));
        }

        let trigger = self.trigger(&query, &parsed.tables);
        Ok(WorkflowDocument { trigger, steps })
    }

    fn trigger(&self, query: &[String], tables: &[String]) -> Option<WorkflowStep> {
        let (_, name) = query.iter().find_map(|tok| {
            TRIGGER_KEYWORDS.iter().find(|(kw, name)| {
                tok == kw && self.catalog.step(name).is_some_and(|d| d.category == StepCategory::Trigger)
            })
        })?;
        let def = self.catalog.step(name)?;
        let mut step = WorkflowStep::new(*name, 0);
        if def.requires_table {
            let mentioned = tables.iter().find(|t| find_phrase(query, &tokenize(t).into_inner()).is_some());
            if let Some(table) = mentioned.or(tables.first()) {
                step = step.with_table(table.clone());
            } else if self.table_fallback {
                step = step.with_table(fallback_table(query));
            }
        }
        Some(step)
    }
}

fn find_phrase(haystack: &[String], phrase: &[String]) -> Option<usize> {
    if phrase.is_empty() || phrase.len() > haystack.len() {
        return None;
    }
    haystack.windows(phrase.len()).position(|w| w == phrase)
}

fn fallback_table(query: &[String]) -> String {
    let word = query
        .windows(2)
        .find(|w| w[1] == "table")
        .map_or("record", |w| w[0].as_str());
    format!("{word}_table")
}

impl Generator for OracleGenerator {
    fn complete(&self, prompt: &Prompt) -> Result<String, GenerateError> {
        self.build(prompt).map(|d| d.to_json())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    endpoint: String,
    timeout: Duration,
    max_tokens: u32,
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    greedy: bool,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

impl RemoteGenerator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_tokens: u32) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            max_tokens,
        }
    }

    fn url(&self) -> String {
        format!("{}/v1/complete", self.endpoint.trim_end_matches('/'))
    }
}

impl Generator for RemoteGenerator {
    fn complete(&self, prompt: &Prompt) -> Result<String, GenerateError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| GenerateError::RemoteUnavailable(e.to_string()))?;
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                GenerateError::RemoteTimeout(self.timeout)
            } else {
                GenerateError::RemoteUnavailable(e.to_string())
            }
        };
        let response = client
            .post(self.url())
            .json(&CompleteRequest {
                prompt: &prompt.text,
                max_tokens: self.max_tokens,
                greedy: true,
            })
            .send()
            .map_err(classify)?;
        let status = response.status();
        if !status.is_success() {
            return Err(GenerateError::RemoteUnavailable(format!("server answered {status}")));
        }
        let body: CompleteResponse = response.json().map_err(|e| {
            if e.is_timeout() {
                GenerateError::RemoteTimeout(self.timeout)
            } else {
                GenerateError::RemoteUnavailable(format!("bad response body: {e}"))
            }
        })?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Oracle,
    Remote,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_tokens() -> u32 {
    512
}

/// Serializable choice of generator; decoding is always greedy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorBinding {
    #[serde(default)]
    pub kind: GeneratorKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub table_fallback: bool,
}

impl Default for GeneratorBinding {
    fn default() -> Self {
        Self::oracle()
    }
}

impl GeneratorBinding {
    pub fn oracle() -> Self {
        Self {
            kind: GeneratorKind::Oracle,
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            max_tokens: default_max_tokens(),
            table_fallback: false,
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            kind: GeneratorKind::Remote,
            endpoint: Some(endpoint.into()),
            ..Self::oracle()
        }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.kind == GeneratorKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(GenerateError::InvalidBinding("remote generator needs an endpoint".into()));
        }
        if self.timeout_ms == 0 {
            return Err(GenerateError::InvalidBinding("timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn instantiate(&self, catalog: Arc<Catalog>) -> Result<Box<dyn Generator>, GenerateError> {
        self.validate()?;
        Ok(match self.kind {
            GeneratorKind::Oracle => Box::new(OracleGenerator::new(catalog).with_table_fallback(self.table_fallback)),
            GeneratorKind::Remote => Box::new(RemoteGenerator::new(
                self.endpoint.clone().expect("validated"),
                Duration::from_millis(self.timeout_ms),
                self.max_tokens,
            )),
        })
    }
}
