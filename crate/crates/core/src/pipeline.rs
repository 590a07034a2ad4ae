//! Retrieval, prompt assembly and gold-injected augmentation.
//!
//! Prompt template (LF line endings, trailing newline after `Flow:`):
//!
//! ```text
//! Tables:
//! <one table name per line>
//! Steps:
//! <one {"name":..,"description":..} object per line>
//! Query: <query on one line>
//! Flow:
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, LabeledSample};
use crate::encoder::{EncodeError, EncoderModel, TextEncoder};
use crate::index::{IndexError, VectorIndex};
use crate::trainer::ItemKind;

pub const DEFAULT_K_STEPS: usize = 15;
pub const DEFAULT_K_TABLES: usize = 10;

const TABLES_HEADER: &str = "Tables:";
const STEPS_HEADER: &str = "Steps:";
const QUERY_PREFIX: &str = "Query: ";
const FLOW_HEADER: &str = "Flow:";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggested {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Suggestions {
    pub steps: Vec<Suggested>,
    pub tables: Vec<Suggested>,
}

impl Suggestions {
    pub fn step_names(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn table_names(&self) -> Vec<&str> {
        self.tables.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.tables.is_empty()
    }
}

/// Full pre-filter rankings for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Rankings {
    pub steps: Vec<(String, f64)>,
    pub tables: Vec<(String, f64)>,
}

impl Rankings {
    /// Top-k per list, with common steps removed before taking k.
    pub fn suggestions(&self, catalog: &Catalog, k_steps: usize, k_tables: usize) -> Suggestions {
        Suggestions {
            steps: self
                .steps
                .iter()
                .filter(|(n, _)| !catalog.is_common(n))
                .take(k_steps)
                .map(to_suggested)
                .collect(),
            tables: self.tables.iter().take(k_tables).map(to_suggested).collect(),
        }
    }

    pub fn step_names(&self) -> Vec<&str> {
        self.steps.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn table_names(&self) -> Vec<&str> {
        self.tables.iter().map(|(n, _)| n.as_str()).collect()
    }
}

fn to_suggested((name, score): &(String, f64)) -> Suggested {
    Suggested {
        name: name.clone(),
        score: *score,
    }
}

/// The serving encoder with its step and table indices.
#[derive(Debug, Clone)]
pub struct Retriever {
    encoder: EncoderModel,
    steps: VectorIndex,
    tables: VectorIndex,
}

impl Retriever {
    /// Fails when either index was built by a different encoder.
    pub fn new(encoder: EncoderModel, steps: VectorIndex, tables: VectorIndex) -> Result<Self, IndexError> {
        let fp = encoder.fingerprint();
        steps.check_fingerprint(&fp)?;
        tables.check_fingerprint(&fp)?;
        if steps.kind() != ItemKind::Step {
            return Err(IndexError::KindMismatch {
                expected: ItemKind::Step,
                found: steps.kind(),
            });
        }
        if tables.kind() != ItemKind::Table {
            return Err(IndexError::KindMismatch {
                expected: ItemKind::Table,
                found: tables.kind(),
            });
        }
        Ok(Self { encoder, steps, tables })
    }

    /// Encodes the catalog with `encoder` and wraps the result.
    pub fn build(encoder: EncoderModel, catalog: &Catalog) -> Result<Self, IndexError> {
        let steps = crate::index::build_index(&encoder, catalog, ItemKind::Step)?;
        let tables = crate::index::build_index(&encoder, catalog, ItemKind::Table)?;
        Ok(Self { encoder, steps, tables })
    }

    pub fn encoder(&self) -> &EncoderModel {
        &self.encoder
    }

    pub fn step_index(&self) -> &VectorIndex {
        &self.steps
    }

    pub fn table_index(&self) -> &VectorIndex {
        &self.tables
    }

    pub fn rank(&self, query: &str) -> Result<Rankings, PipelineError> {
        let v = self.encoder.encode(query)?;
        Ok(Rankings {
            steps: self.steps.ranking(&v)?,
            tables: self.tables.ranking(&v)?,
        })
    }

    pub fn retrieve_suggestions(&self, query: &str, catalog: &Catalog, k_steps: usize, k_tables: usize) -> Result<Suggestions, PipelineError> {
        Ok(self.rank(query)?.suggestions(catalog, k_steps, k_tables))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
}

fn one_line(s: &str) -> String {
    s.replace(['\r', '\n'], " ")
}

/// Renders suggestions and the query in the fixed prompt layout. Steps
/// missing from `catalog` are rendered with their name only.
pub fn assemble_prompt(suggestions: &Suggestions, query: &str, catalog: &Catalog) -> Prompt {
    let mut text = String::new();
    text.push_str(TABLES_HEADER);
    text.push('\n');
    for t in &suggestions.tables {
        text.push_str(&one_line(&t.name));
        text.push('\n');
    }
    text.push_str(STEPS_HEADER);
    text.push('\n');
    for s in &suggestions.steps {
        let line = match catalog.step(&s.name) {
            Some(def) => def.prompt_line(),
            None => serde_json::json!({ "name": s.name }).to_string(),
        };
        text.push_str(&line);
        text.push('\n');
    }
    text.push_str(QUERY_PREFIX);
    text.push_str(&one_line(query));
    text.push('\n');
    text.push_str(FLOW_HEADER);
    text.push('\n');
    Prompt { text }
}

/// Suggestions and query recovered from a prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub tables: Vec<String>,
    pub steps: Vec<String>,
    pub query: String,
}

/// Inverse of [`assemble_prompt`]; `None` when the layout does not match.
pub fn parse_prompt(prompt: &Prompt) -> Option<ParsedPrompt> {
    let mut lines = prompt.text.lines();
    if lines.next()? != TABLES_HEADER {
        return None;
    }
    let mut parsed = ParsedPrompt::default();
    loop {
        let line = lines.next()?;
        if line == STEPS_HEADER {
            break;
        }
        parsed.tables.push(line.to_string());
    }
    loop {
        let line = lines.next()?;
        if let Some(q) = line.strip_prefix(QUERY_PREFIX) {
            parsed.query = q.to_string();
            break;
        }
        let value: serde_json::Value = serde_json::from_str(line).ok()?;
        parsed.steps.push(value.get("name")?.as_str()?.to_string());
    }
    (lines.next()? == FLOW_HEADER).then_some(parsed)
}

/// Gold non-common steps and gold table merged with retrieved distractors.
///
/// Each list keeps retrieval order, holds every gold item, and fills the
/// remaining `k` slots with the best-ranked non-gold items. Gold items that
/// were not retrieved are appended in gold order.
pub fn augment_suggestions(sample: &LabeledSample, rankings: &Rankings, catalog: &Catalog, k_steps: usize, k_tables: usize) -> Suggestions {
    let mut gold_steps: Vec<&str> = Vec::new();
    for name in sample.gold.step_names() {
        if !catalog.is_common(name) && !gold_steps.contains(&name) {
            gold_steps.push(name);
        }
    }
    let gold_table: Vec<&str> = sample.gold.trigger.iter().filter_map(|t| t.table()).collect();
    let retrieved = rankings.suggestions(catalog, k_steps, k_tables);
    let score_of = |ranking: &[(String, f64)], name: &str| ranking.iter().find(|(n, _)| n == name).map_or(0.0, |(_, s)| *s);
    Suggestions {
        steps: merge(&retrieved.steps, &gold_steps, k_steps, |n| score_of(&rankings.steps, n)),
        tables: merge(&retrieved.tables, &gold_table, k_tables, |n| score_of(&rankings.tables, n)),
    }
}

fn merge(retrieved: &[Suggested], gold: &[&str], k: usize, score_of: impl Fn(&str) -> f64) -> Vec<Suggested> {
    let gold_set: HashSet<&str> = gold.iter().copied().collect();
    let mut budget = k.saturating_sub(gold.len());
    let mut out = Vec::new();
    let mut placed = HashSet::new();
    for s in retrieved {
        if gold_set.contains(s.name.as_str()) {
            placed.insert(s.name.as_str());
            out.push(s.clone());
        } else if budget > 0 {
            budget -= 1;
            out.push(s.clone());
        }
    }
    for g in gold {
        if !placed.contains(g) {
            out.push(Suggested {
                name: g.to_string(),
                score: score_of(g),
            });
        }
    }
    out
}

/// One generator training example: the prompt and the expected output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedExample {
    pub prompt: Prompt,
    pub completion: String,
}

pub fn augment_training_set(samples: &[LabeledSample], retriever: &Retriever, catalog: &Catalog, k_steps: usize, k_tables: usize) -> Result<Vec<AugmentedExample>, PipelineError> {
    samples
        .iter()
        .map(|s| {
            let rankings = retriever.rank(&s.query)?;
            let suggestions = augment_suggestions(s, &rankings, catalog, k_steps, k_tables);
            Ok(AugmentedExample {
                prompt: assemble_prompt(&suggestions, &s.query, catalog),
                completion: s.gold.to_json(),
            })
        })
        .collect()
}
