//! Generation and retrieval metrics.
//!
//! Per sample: trigger exact match (skipped when the gold has no trigger),
//! bag-of-steps multiset F1, hallucinated step/table rates (skipped when
//! nothing of that kind was generated) and recall@k of the retriever's
//! pre-filter ranking (skipped when nothing is needed). Split aggregates are
//! means over the non-skipped samples; an all-skipped metric aggregates to 0.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, LabeledSample, WorkflowDocument};
use crate::generator::{generate, Generator};
use crate::pipeline::{assemble_prompt, augment_suggestions, PipelineError, Rankings, Retriever, Suggestions, DEFAULT_K_STEPS, DEFAULT_K_TABLES};
use crate::trainer::gold_items;

/// Source of full step/table rankings for a query.
pub trait Ranker {
    fn rank(&self, query: &str) -> Result<Rankings, PipelineError>;
}

impl Ranker for Retriever {
    fn rank(&self, query: &str) -> Result<Rankings, PipelineError> {
        Retriever::rank(self, query)
    }
}

/// 1.0 when triggers match by name and properties, 0.0 otherwise, `None`
/// when the gold workflow has no trigger.
pub fn trigger_exact_match(generated: &WorkflowDocument, gold: &WorkflowDocument) -> Option<f64> {
    let gold_trigger = gold.trigger.as_ref()?;
    let hit = generated
        .trigger
        .as_ref()
        .is_some_and(|t| t.name == gold_trigger.name && t.properties == gold_trigger.properties);
    Some(if hit { 1.0 } else { 0.0 })
}

/// Multiset F1: 2·|gen ⊓ gold| / (|gen| + |gold|); 1 when both are empty.
pub fn bag_of_steps(generated: &[&str], gold: &[&str]) -> f64 {
    if generated.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0usize;
    for g in generated {
        if let Some(c) = counts.get_mut(g) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    2.0 * overlap as f64 / (generated.len() + gold.len()) as f64
}

/// Fractions of generated step names and table values missing from the catalog.
pub fn hallucination_rates(generated: &WorkflowDocument, catalog: &Catalog) -> (Option<f64>, Option<f64>) {
    let rate = |names: Vec<&str>, known: &dyn Fn(&str) -> bool| {
        (!names.is_empty()).then(|| names.iter().filter(|n| !known(n)).count() as f64 / names.len() as f64)
    };
    let hs = rate(generated.step_names().collect(), &|n| catalog.has_step(n));
    let ht = rate(generated.table_values().collect(), &|n| catalog.has_table(n));
    (hs, ht)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Fraction of needed items found.
    #[default]
    Fraction,
    /// 1 only when every needed item is found.
    Coverage,
}

impl FromStr for RecallMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fraction" => Ok(Self::Fraction),
            "coverage" => Ok(Self::Coverage),
            other => Err(format!("unknown recall mode {other:?}")),
        }
    }
}

impl fmt::Display for RecallMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fraction => "fraction",
            Self::Coverage => "coverage",
        })
    }
}

/// `None` when nothing is needed.
pub fn recall_at_k(ranked: &[&str], needed: &[&str], k: usize, mode: RecallMode) -> Option<f64> {
    let needed: BTreeSet<&str> = needed.iter().copied().collect();
    if needed.is_empty() {
        return None;
    }
    let top: HashSet<&str> = ranked.iter().take(k).copied().collect();
    let found = needed.iter().filter(|n| top.contains(*n)).count();
    Some(match mode {
        RecallMode::Fraction => found as f64 / needed.len() as f64,
        RecallMode::Coverage => f64::from(found == needed.len()),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Uniqueness {
    pub unique_steps_generated: usize,
    /// Fraction in [0, 1] of the distinct step names that are not in the catalog.
    pub pct_unique_steps_hallucinated: f64,
    pub unique_tables_generated: usize,
    pub pct_unique_tables_hallucinated: f64,
}

pub fn uniqueness_analysis<'a>(documents: impl IntoIterator<Item = &'a WorkflowDocument>, catalog: &Catalog) -> Uniqueness {
    let mut steps = BTreeSet::new();
    let mut tables = BTreeSet::new();
    for doc in documents {
        steps.extend(doc.step_names());
        tables.extend(doc.table_values());
    }
    let frac = |total: usize, bad: usize| if total == 0 { 0.0 } else { bad as f64 / total as f64 };
    Uniqueness {
        unique_steps_generated: steps.len(),
        pct_unique_steps_hallucinated: frac(steps.len(), steps.iter().filter(|s| !catalog.has_step(s)).count()),
        unique_tables_generated: tables.len(),
        pct_unique_tables_hallucinated: frac(tables.len(), tables.iter().filter(|t| !catalog.has_table(t)).count()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionMode {
    /// Top-k retrieval with common steps removed.
    #[default]
    Retrieved,
    /// Retrieval merged with every gold non-common step and the gold table.
    GoldInjected,
    /// Empty suggestion lists.
    None,
}

impl FromStr for SuggestionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieved" => Ok(Self::Retrieved),
            "gold" | "gold_injected" => Ok(Self::GoldInjected),
            "none" => Ok(Self::None),
            other => Err(format!("unknown suggestion mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_steps: usize,
    pub k_tables: usize,
    pub recall_k_steps: usize,
    pub recall_k_tables: usize,
    pub recall_mode: RecallMode,
    pub suggestions: SuggestionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_steps: DEFAULT_K_STEPS,
            k_tables: DEFAULT_K_TABLES,
            recall_k_steps: 15,
            recall_k_tables: 10,
            recall_mode: RecallMode::Fraction,
            suggestions: SuggestionMode::Retrieved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub query: String,
    pub trigger_em: Option<f64>,
    pub bofs: f64,
    pub hs: Option<f64>,
    pub ht: Option<f64>,
    pub step_recall: Option<f64>,
    pub table_recall: Option<f64>,
    pub generated: Option<WorkflowDocument>,
    pub hallucinated_steps: Vec<String>,
    pub hallucinated_tables: Vec<String>,
    pub error: Option<String>,
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trigger_em: f64,
    pub bofs: f64,
    pub hs: f64,
    pub ht: f64,
    pub step_recall_at_k: f64,
    pub table_recall_at_k: f64,
    pub unique_steps_generated: usize,
    pub pct_unique_steps_hallucinated: f64,
    pub unique_tables_generated: usize,
    pub pct_unique_tables_hallucinated: f64,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample: Vec<SampleRecord>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    /// Aggregates per-sample records in index order.
    pub fn from_records(per_sample: Vec<SampleRecord>, catalog: &Catalog) -> Self {
        let u = uniqueness_analysis(per_sample.iter().filter_map(|r| r.generated.as_ref()), catalog);
        Self {
            trigger_em: mean_of(per_sample.iter().map(|r| r.trigger_em)),
            bofs: mean_of(per_sample.iter().map(|r| Some(r.bofs))),
            hs: mean_of(per_sample.iter().map(|r| r.hs)),
            ht: mean_of(per_sample.iter().map(|r| r.ht)),
            step_recall_at_k: mean_of(per_sample.iter().map(|r| r.step_recall)),
            table_recall_at_k: mean_of(per_sample.iter().map(|r| r.table_recall)),
            unique_steps_generated: u.unique_steps_generated,
            pct_unique_steps_hallucinated: u.pct_unique_steps_hallucinated,
            unique_tables_generated: u.unique_tables_generated,
            pct_unique_tables_hallucinated: u.pct_unique_tables_hallucinated,
            sample_count: per_sample.len(),
            per_sample,
        }
    }

    /// True when every rate is in [0, 1] and the aggregates equal a
    /// recomputation from the per-sample records.
    pub fn is_consistent(&self, catalog: &Catalog) -> bool {
        let rates = [
            self.trigger_em,
            self.bofs,
            self.hs,
            self.ht,
            self.step_recall_at_k,
            self.table_recall_at_k,
            self.pct_unique_steps_hallucinated,
            self.pct_unique_tables_hallucinated,
        ];
        rates.iter().all(|r| (0.0..=1.0).contains(r)) && Self::from_records(self.per_sample.clone(), catalog) == *self
    }

    pub fn without_samples(&self) -> Self {
        Self {
            per_sample: Vec::new(),
            ..self.clone()
        }
    }
}

fn sample_recall(sample: &LabeledSample, rankings: Option<&Rankings>, config: &EvalConfig) -> (Option<f64>, Option<f64>) {
    let (steps, table) = gold_items(sample);
    let tables: Vec<&str> = table.into_iter().collect();
    let empty = Rankings {
        steps: vec![],
        tables: vec![],
    };
    let r = rankings.unwrap_or(&empty);
    (
        recall_at_k(&r.step_names(), &steps, config.recall_k_steps, config.recall_mode),
        recall_at_k(&r.table_names(), &tables, config.recall_k_tables, config.recall_mode),
    )
}

/// Retrieval recall only, averaged over samples that need items.
pub fn retrieval_recall(samples: &[LabeledSample], ranker: &dyn Ranker, config: &EvalConfig) -> (f64, f64) {
    let per: Vec<(Option<f64>, Option<f64>)> = samples
        .iter()
        .map(|s| sample_recall(s, ranker.rank(&s.query).ok().as_ref(), config))
        .collect();
    (mean_of(per.iter().map(|p| p.0)), mean_of(per.iter().map(|p| p.1)))
}

/// Suggestions the generator sees for `sample` under `config`.
pub fn suggestions_for(sample: &LabeledSample, rankings: Option<&Rankings>, catalog: &Catalog, config: &EvalConfig) -> Suggestions {
    let Some(rankings) = rankings else {
        return Suggestions::default();
    };
    match config.suggestions {
        SuggestionMode::Retrieved => rankings.suggestions(catalog, config.k_steps, config.k_tables),
        SuggestionMode::GoldInjected => augment_suggestions(sample, rankings, catalog, config.k_steps, config.k_tables),
        SuggestionMode::None => Suggestions::default(),
    }
}

/// Retrieve → prompt → generate → parse for every sample, then aggregate.
/// Per-sample failures are recorded, never fatal.
pub fn evaluate_split(samples: &[LabeledSample], ranker: &dyn Ranker, catalog: &Catalog, generator: &dyn Generator, config: &EvalConfig) -> EvalReport {
    let records = samples
        .iter()
        .enumerate()
        .map(|(index, sample)| evaluate_sample(index, sample, ranker, catalog, generator, config))
        .collect();
    EvalReport::from_records(records, catalog)
}

fn evaluate_sample(index: usize, sample: &LabeledSample, ranker: &dyn Ranker, catalog: &Catalog, generator: &dyn Generator, config: &EvalConfig) -> SampleRecord {
    let mut errors = Vec::new();
    let rankings = match ranker.rank(&sample.query) {
        Ok(r) => Some(r),
        Err(e) => {
            errors.push(format!("retrieval: {e}"));
            None
        }
    };
    let (step_recall, table_recall) = sample_recall(sample, rankings.as_ref(), config);
    let suggestions = if config.suggestions == SuggestionMode::GoldInjected && rankings.is_none() {
        let empty = Rankings {
            steps: vec![],
            tables: vec![],
        };
        augment_suggestions(sample, &empty, catalog, config.k_steps, config.k_tables)
    } else {
        suggestions_for(sample, rankings.as_ref(), catalog, config)
    };
    let prompt = assemble_prompt(&suggestions, &sample.query, catalog);

    let (generated, report, raw) = match generate(generator, &prompt, catalog) {
        Ok(g) => (Some(g.document), Some(g.report), Some(g.raw)),
        Err(e) => {
            let raw = e.raw_text().map(str::to_string);
            errors.push(format!("generation: {e}"));
            (None, None, raw)
        }
    };
    let empty_doc = WorkflowDocument::default();
    let doc = generated.as_ref().unwrap_or(&empty_doc);
    let gold_steps: Vec<&str> = sample.gold.step_names().collect();
    let gen_steps: Vec<&str> = doc.step_names().collect();
    let (hs, ht) = hallucination_rates(doc, catalog);

    SampleRecord {
        index,
        query: sample.query.clone(),
        trigger_em: trigger_exact_match(doc, &sample.gold),
        bofs: bag_of_steps(&gen_steps, &gold_steps),
        hs,
        ht,
        step_recall,
        table_recall,
        hallucinated_steps: report.as_ref().map(|r| r.hallucinated_steps()).unwrap_or_default(),
        hallucinated_tables: report.as_ref().map(|r| r.hallucinated_tables()).unwrap_or_default(),
        generated,
        error: (!errors.is_empty()).then(|| errors.join("; ")),
        raw,
    }
}
