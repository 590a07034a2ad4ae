//! Seeded synthetic catalogs and labeled samples.
//!
//! Action steps are `verb_noun` pairs, tables are plural nouns, and queries
//! phrase each gold step as "verb noun" so that every name a workflow needs is
//! recoverable from its query. Step popularity decays geometrically, which
//! gives the usual long tail plus a head of common steps.

use std::collections::HashMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{write_samples, Catalog, CatalogError, LabeledSample, StepCategory, StepDefinition, TableName, WorkflowDocument, WorkflowStep, LOGIC_STEPS};

pub const VERBS: [&str; 20] = [
    "send", "create", "update", "delete", "assign", "approve", "archive", "notify", "close", "escalate", "publish", "export", "import",
    "validate", "schedule", "copy", "merge", "sync", "post", "log",
];

pub const NOUNS: [&str; 52] = [
    "email", "ticket", "incident", "task", "user", "invoice", "order", "report", "contract", "payment", "approval", "request", "alert",
    "comment", "document", "event", "expense", "file", "group", "issue", "lead", "message", "note", "opportunity", "project", "quote",
    "refund", "reminder", "review", "shipment", "survey", "account", "asset", "attachment", "budget", "campaign", "case", "change",
    "contact", "customer", "device", "employee", "feedback", "invitation", "license", "meeting", "milestone", "policy", "product",
    "receipt", "vendor", "webhook",
];

const FILLER: [&str; 40] = [
    "quickly", "securely", "batch", "inline", "primary", "secondary", "remote", "local", "standard", "custom", "optional", "default",
    "async", "bulk", "single", "verified", "draft", "final", "internal", "external", "regional", "global", "legacy", "modern", "manual",
    "automatic", "shared", "private", "public", "temporary", "permanent", "weekly", "monthly", "hourly", "priority", "routine",
    "detailed", "summary", "compact", "extended",
];

const FILLER_PER_DESCRIPTION: usize = 12;

const CONNECTORS: [&str; 4] = ["then", "and", "and then", "after that"];

pub const TRIGGER_STEPS: [(&str, bool); 3] = [("daily", false), ("record_created", true), ("record_updated", true)];

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    /// Total catalog steps including logic and trigger steps.
    pub step_count: usize,
    pub table_count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub common_count: usize,
    /// Popularity ratio between consecutive action steps.
    pub decay: f64,
    pub max_steps_per_sample: usize,
    /// Probabilities of no trigger, a daily trigger and a record trigger.
    pub trigger_mix: [f64; 3],
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            step_count: 200,
            table_count: 50,
            train_count: 500,
            test_count: 100,
            common_count: 10,
            decay: 0.99,
            max_steps_per_sample: 3,
            trigger_mix: [0.2, 0.3, 0.5],
        }
    }
}

impl GenSpec {
    fn action_count(&self) -> usize {
        self.step_count.saturating_sub(LOGIC_STEPS.len() + TRIGGER_STEPS.len())
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |m: String| Err(DatagenError::InvalidSpec(m));
        let actions = self.action_count();
        if actions == 0 || actions > VERBS.len() * NOUNS.len() {
            return fail(format!("step_count must leave between 1 and {} action steps", VERBS.len() * NOUNS.len()));
        }
        if self.table_count == 0 || self.table_count > NOUNS.len() {
            return fail(format!("table_count must be in 1..={}", NOUNS.len()));
        }
        if self.common_count > actions {
            return fail("common_count exceeds the number of action steps".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail("decay must be in (0, 1]".into());
        }
        if self.max_steps_per_sample == 0 || self.max_steps_per_sample > actions {
            return fail("max_steps_per_sample must be in 1..=action steps".into());
        }
        if self.trigger_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || self.trigger_mix.iter().sum::<f64>() <= 0.0 {
            return fail("trigger_mix must be non-negative with a positive sum".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub catalog: Catalog,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl SyntheticCorpus {
    /// Writes `steps.jsonl`, `tables.jsonl`, `train.jsonl` and `test.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<(), CatalogError> {
        self.catalog.save_dir(dir)?;
        write_samples(&dir.join("train.jsonl"), &self.train)?;
        write_samples(&dir.join("test.jsonl"), &self.test)
    }
}

pub fn pluralize(noun: &str) -> String {
    let bytes = noun.as_bytes();
    if noun.ends_with('y') && bytes.len() > 1 && !b"aeiou".contains(&bytes[bytes.len() - 2]) {
        format!("{}ies", &noun[..noun.len() - 1])
    } else if ["s", "x", "ch", "sh"].iter().any(|s| noun.ends_with(s)) {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    chars.next().map_or_else(String::new, |c| c.to_uppercase().chain(chars).collect())
}

struct Action {
    name: String,
    phrase: String,
}

pub fn generate_corpus(spec: &GenSpec) -> Result<SyntheticCorpus, DatagenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut pairs: Vec<(&str, &str)> = VERBS.iter().flat_map(|v| NOUNS.iter().map(move |n| (*v, *n))).collect();
    pairs.shuffle(&mut rng);
    // shuffled order doubles as popularity order
    let actions: Vec<Action> = pairs[..spec.action_count()]
        .iter()
        .map(|(v, n)| Action {
            name: format!("{v}_{n}"),
            phrase: format!("{v} {n}"),
        })
        .collect();

    let mut steps = Vec::with_capacity(spec.step_count);
    for (i, a) in actions.iter().enumerate() {
        let fillers: Vec<&str> = FILLER.choose_multiple(&mut rng, FILLER_PER_DESCRIPTION).copied().collect();
        let (verb, noun) = pairs[i];
        let description = format!("{} the {noun} with {} options", capitalize(verb), fillers.join(" "));
        steps.push(StepDefinition::new(a.name.clone(), StepCategory::Action, description));
    }
    for logic in LOGIC_STEPS {
        steps.push(StepDefinition::new(logic, StepCategory::FlowLogic, format!("{logic} control block")));
    }
    for (name, needs_table) in TRIGGER_STEPS {
        let description = if needs_table {
            format!("Starts when a {} occurs", name.replace('_', " "))
        } else {
            "Starts once per day".to_string()
        };
        let def = StepDefinition::new(name, StepCategory::Trigger, description);
        steps.push(if needs_table { def.with_table() } else { def });
    }

    let mut nouns: Vec<&str> = NOUNS.to_vec();
    nouns.shuffle(&mut rng);
    let tables: Vec<String> = nouns[..spec.table_count].iter().map(|n| pluralize(n)).collect();

    let common = actions[..spec.common_count].iter().map(|a| a.name.clone()).collect();
    let catalog = Catalog::new(steps, tables.iter().map(TableName::new).collect(), common);

    let weights: Vec<f64> = (0..actions.len()).map(|i| spec.decay.powi(i as i32)).collect();
    let popularity = WeightedIndex::new(&weights).map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;
    let trigger_kind = WeightedIndex::new(spec.trigger_mix).map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;

    let mut sample = || draw_sample(&mut rng, &actions, &tables, &popularity, &trigger_kind, spec.max_steps_per_sample);
    let train = (0..spec.train_count).map(|_| sample()).collect();
    let test = (0..spec.test_count).map(|_| sample()).collect();
    Ok(SyntheticCorpus { catalog, train, test })
}

fn draw_sample(
    rng: &mut ChaCha8Rng,
    actions: &[Action],
    tables: &[String],
    popularity: &WeightedIndex<f64>,
    trigger_kind: &WeightedIndex<f64>,
    max_steps: usize,
) -> LabeledSample {
    let count = rng.random_range(1..=max_steps);
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    while chosen.len() < count {
        let i = popularity.sample(rng);
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }

    let mut body = String::new();
    for (k, &i) in chosen.iter().enumerate() {
        if k > 0 {
            body.push(' ');
            body.push_str(CONNECTORS.choose(rng).expect("non-empty"));
            body.push(' ');
        }
        body.push_str(&actions[i].phrase);
    }

    let (query, trigger) = match trigger_kind.sample(rng) {
        0 => (capitalize(&body), None),
        1 => {
            let q = if rng.random_bool(0.5) { format!("Daily, {body}") } else { format!("{} daily", capitalize(&body)) };
            (q, Some(WorkflowStep::new("daily", 0)))
        }
        _ => {
            let (event, name) = if rng.random_bool(0.5) { ("created", "record_created") } else { ("updated", "record_updated") };
            let table = tables.choose(rng).expect("non-empty");
            let q = format!("When a record is {event} in the {table} table, {body}");
            (q, Some(WorkflowStep::new(name, 0).with_table(table.clone())))
        }
    };

    let steps = chosen
        .iter()
        .enumerate()
        .map(|(k, &i)| WorkflowStep::new(actions[i].name.clone(), k as u32 + 1))
        .collect();
    LabeledSample {
        query,
        gold: WorkflowDocument { trigger, steps },
    }
}

/// The `count` most frequent gold step names, ties broken by name.
pub fn frequent_steps(samples: &[LabeledSample], count: usize) -> Vec<String> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        for name in s.gold.step_names() {
            *freq.entry(name).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(count).map(|(n, _)| n.to_string()).collect()
}
