//! Workflow document schema, step/table catalogs and validation.
//!
//! A [`WorkflowDocument`] is serialized as a single JSON object:
//!
//! ```text
//! {"trigger":{"name":"daily","order":0,"parent":null,"properties":{}},
//!  "steps":[{"name":"send_email","order":1,"parent":null,"properties":{}}]}
//! ```
//!
//! `parent` is an index into `steps` (or `null` for top-level steps). Unknown
//! step or table names are never rejected by the parser; they are recorded in
//! the [`ValidationReport`] so that hallucination metrics can count them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Built-in flow-logic step names. Catalogs may add more.
pub const LOGIC_STEPS: [&str; 5] = ["IF", "ELSE", "FOREACH", "TRY", "CATCH"];

/// Property key holding the table name of a trigger that needs one.
pub const TABLE_PROPERTY: &str = "table";

pub const STEPS_FILE: &str = "steps.jsonl";
pub const TABLES_FILE: &str = "tables.jsonl";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed document at line {line}, column {column}: {message}")]
pub struct MalformedDocument {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCategory {
    Action,
    FlowLogic,
    Trigger,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDefinition {
    pub name: String,
    pub category: StepCategory,
    #[serde(default)]
    pub description: String,
    /// Only meaningful for triggers.
    #[serde(default)]
    pub requires_table: bool,
}

#[derive(Serialize)]
struct PromptLine<'a> {
    name: &'a str,
    description: &'a str,
}

impl StepDefinition {
    pub fn new(name: impl Into<String>, category: StepCategory, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            category,
            description: description.into(),
            requires_table: false,
        }
    }

    pub fn with_table(mut self) -> Self {
        self.requires_table = true;
        self
    }

    /// One-line JSON object used both in prompts and as retriever item text.
    pub fn prompt_line(&self) -> String {
        serde_json::to_string(&PromptLine {
            name: &self.name,
            description: &self.description,
        })
        .expect("string fields always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TableName {
    pub name: String,
}

impl TableName {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }
}

/// Closed lexicon of steps and tables for one deployment.
///
/// Steps and tables are kept sorted by name; that is the iteration order used
/// everywhere downstream (index rows, negative candidates).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    steps: Vec<StepDefinition>,
    tables: Vec<TableName>,
    common_steps: Vec<String>,
    step_lookup: HashMap<String, usize>,
    table_lookup: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(mut steps: Vec<StepDefinition>, mut tables: Vec<TableName>, common_steps: Vec<String>) -> Self {
        steps.sort_by(|a, b| a.name.cmp(&b.name));
        tables.sort();
        let mut step_lookup = HashMap::with_capacity(steps.len());
        for (i, s) in steps.iter().enumerate() {
            step_lookup.entry(s.name.clone()).or_insert(i);
        }
        let mut table_lookup = HashMap::with_capacity(tables.len());
        for (i, t) in tables.iter().enumerate() {
            table_lookup.entry(t.name.clone()).or_insert(i);
        }
        Self {
            steps,
            tables,
            common_steps,
            step_lookup,
            table_lookup,
        }
    }

    pub fn steps(&self) -> &[StepDefinition] {
        &self.steps
    }

    pub fn tables(&self) -> &[TableName] {
        &self.tables
    }

    pub fn common_steps(&self) -> &[String] {
        &self.common_steps
    }

    pub fn step(&self, name: &str) -> Option<&StepDefinition> {
        self.step_lookup.get(name).map(|&i| &self.steps[i])
    }

    pub fn has_step(&self, name: &str) -> bool {
        self.step_lookup.contains_key(name)
    }

    pub fn has_table(&self, name: &str) -> bool {
        self.table_lookup.contains_key(name)
    }

    pub fn is_common(&self, name: &str) -> bool {
        self.common_steps.iter().any(|c| c == name)
    }

    pub fn with_common_steps(self, common_steps: Vec<String>) -> Self {
        Self::new(self.steps, self.tables, common_steps)
    }

    /// Reads `steps.jsonl` and `tables.jsonl` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, CatalogError> {
        let step_records: Vec<StepRecord> = read_jsonl(&dir.join(STEPS_FILE))?;
        let tables: Vec<TableName> = read_jsonl(&dir.join(TABLES_FILE))?;
        let mut common: Vec<(u32, String)> = step_records
            .iter()
            .filter_map(|r| r.common_rank.map(|rank| (rank, r.step.name.clone())))
            .collect();
        common.sort();
        let steps = step_records.into_iter().map(|r| r.step).collect();
        Ok(Self::new(steps, tables, common.into_iter().map(|(_, n)| n).collect()))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), CatalogError> {
        let records: Vec<StepRecord> = self
            .steps
            .iter()
            .map(|s| StepRecord {
                step: s.clone(),
                common_rank: self.common_steps.iter().position(|c| *c == s.name).map(|p| p as u32),
            })
            .collect();
        write_jsonl(&dir.join(STEPS_FILE), &records)?;
        write_jsonl(&dir.join(TABLES_FILE), &self.tables)
    }
}

/// On-disk step record: a step definition plus its rank among common steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(flatten)]
    pub step: StepDefinition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_rank: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowStep {
    pub name: String,
    pub order: u32,
    pub parent: Option<usize>,
    pub properties: BTreeMap<String, String>,
}

impl WorkflowStep {
    pub fn new(name: impl Into<String>, order: u32) -> Self {
        Self {
            name: name.into(),
            order,
            parent: None,
            properties: BTreeMap::new(),
        }
    }

    pub fn with_parent(mut self, parent: usize) -> Self {
        self.parent = Some(parent);
        self
    }

    pub fn with_table(mut self, table: impl Into<String>) -> Self {
        self.properties.insert(TABLE_PROPERTY.to_string(), table.into());
        self
    }

    pub fn table(&self) -> Option<&str> {
        self.properties.get(TABLE_PROPERTY).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowDocument {
    pub trigger: Option<WorkflowStep>,
    pub steps: Vec<WorkflowStep>,
}

impl WorkflowDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("workflow documents always serialize")
    }

    pub fn step_names(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.name.as_str())
    }

    /// Table property values across the trigger and all steps.
    pub fn table_values(&self) -> impl Iterator<Item = &str> {
        self.trigger.iter().chain(self.steps.iter()).filter_map(WorkflowStep::table)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub query: String,
    pub gold: WorkflowDocument,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameKind {
    Step,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    Parse { location: String, message: String },
    HallucinatedStep { location: String, name: String },
    HallucinatedTable { location: String, name: String },
    Relation { location: String, message: String },
    DuplicateName { of: NameKind, name: String },
    EmptyName { of: NameKind, position: usize },
    UnknownCommonStep { name: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn hallucinated_steps(&self) -> Vec<String> {
        self.issues
            .iter()
            .filter_map(|i| match i {
                Issue::HallucinatedStep { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn hallucinated_tables(&self) -> Vec<String> {
        self.issues
            .iter()
            .filter_map(|i| match i {
                Issue::HallucinatedTable { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn parse_errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| matches!(i, Issue::Parse { .. }))
    }

    pub fn relation_violations(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| matches!(i, Issue::Relation { .. }))
    }

    fn push(&mut self, issue: Issue) {
        self.issues.push(issue);
    }
}

fn location(index: Option<usize>) -> String {
    match index {
        None => "trigger".to_string(),
        Some(i) => format!("steps[{i}]"),
    }
}

/// Parses a serialized workflow and checks it against `catalog`.
///
/// Only text that is not JSON at all (or not a JSON object) is an error.
/// Shape problems, unknown names and bad parent/order relations are reported.
pub fn parse_workflow(text: &str, catalog: &Catalog) -> Result<(WorkflowDocument, ValidationReport), MalformedDocument> {
    let value: Value = serde_json::from_str(text.trim()).map_err(|e| MalformedDocument {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Value::Object(root) = value else {
        return Err(MalformedDocument {
            line: 1,
            column: 1,
            message: "top-level value is not an object".to_string(),
        });
    };

    let mut report = ValidationReport::default();
    let mut doc = WorkflowDocument::default();

    match root.get("trigger") {
        None | Some(Value::Null) => {}
        Some(v) => doc.trigger = parse_step(v, None, &mut report),
    }
    match root.get("steps") {
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                if let Some(step) = parse_step(item, Some(i), &mut report) {
                    doc.steps.push(step);
                }
            }
        }
        None | Some(Value::Null) => report.push(Issue::Parse {
            location: "steps".to_string(),
            message: "missing steps array".to_string(),
        }),
        Some(_) => report.push(Issue::Parse {
            location: "steps".to_string(),
            message: "steps is not an array".to_string(),
        }),
    }

    check_document(&doc, catalog, &mut report);
    Ok((doc, report))
}

fn parse_step(value: &Value, index: Option<usize>, report: &mut ValidationReport) -> Option<WorkflowStep> {
    let loc = location(index);
    let Value::Object(obj) = value else {
        report.push(Issue::Parse {
            location: loc,
            message: "step is not an object".to_string(),
        });
        return None;
    };
    let Some(name) = obj.get("name").and_then(Value::as_str) else {
        report.push(Issue::Parse {
            location: loc,
            message: "step has no string name".to_string(),
        });
        return None;
    };
    let mut step = WorkflowStep::new(name, 0);
    match obj.get("order") {
        Some(v) => match v.as_u64().and_then(|o| u32::try_from(o).ok()) {
            Some(o) => step.order = o,
            None => report.push(Issue::Parse {
                location: loc.clone(),
                message: format!("order is not a non-negative integer: {v}"),
            }),
        },
        None => report.push(Issue::Parse {
            location: loc.clone(),
            message: "missing order".to_string(),
        }),
    }
    match obj.get("parent") {
        None | Some(Value::Null) => {}
        Some(v) => match v.as_u64() {
            Some(p) => step.parent = Some(p as usize),
            None => report.push(Issue::Parse {
                location: loc.clone(),
                message: format!("parent is not an index: {v}"),
            }),
        },
    }
    match obj.get("properties") {
        None | Some(Value::Null) => {}
        Some(Value::Object(props)) => {
            for (k, v) in props {
                match v.as_str() {
                    Some(s) => {
                        step.properties.insert(k.clone(), s.to_string());
                    }
                    None => report.push(Issue::Parse {
                        location: loc.clone(),
                        message: format!("property {k} is not a string"),
                    }),
                }
            }
        }
        Some(_) => report.push(Issue::Parse {
            location: loc.clone(),
            message: "properties is not an object".to_string(),
        }),
    }
    Some(step)
}

fn check_document(doc: &WorkflowDocument, catalog: &Catalog, report: &mut ValidationReport) {
    if let Some(trigger) = &doc.trigger {
        let loc = location(None);
        match catalog.step(&trigger.name) {
            None => report.push(Issue::HallucinatedStep {
                location: loc.clone(),
                name: trigger.name.clone(),
            }),
            Some(def) => {
                if def.category != StepCategory::Trigger {
                    report.push(Issue::Relation {
                        location: loc.clone(),
                        message: format!("{} is not a trigger step", trigger.name),
                    });
                } else if def.requires_table && trigger.table().is_none() {
                    report.push(Issue::Relation {
                        location: loc.clone(),
                        message: format!("trigger {} requires a table property", trigger.name),
                    });
                }
            }
        }
        if trigger.parent.is_some() {
            report.push(Issue::Relation {
                location: loc.clone(),
                message: "trigger cannot have a parent".to_string(),
            });
        }
        check_table(trigger, &loc, catalog, report);
    }

    let mut last_order: HashMap<Option<usize>, u32> = HashMap::new();
    for (i, step) in doc.steps.iter().enumerate() {
        let loc = location(Some(i));
        match catalog.step(&step.name) {
            None => report.push(Issue::HallucinatedStep {
                location: loc.clone(),
                name: step.name.clone(),
            }),
            Some(def) if def.category == StepCategory::Trigger => report.push(Issue::Relation {
                location: loc.clone(),
                message: format!("trigger step {} inside the step list", step.name),
            }),
            Some(_) => {}
        }
        if let Some(p) = step.parent {
            if p >= i {
                report.push(Issue::Relation {
                    location: loc.clone(),
                    message: format!("parent {p} does not refer to an earlier step"),
                });
            } else if let Some(parent_def) = catalog.step(&doc.steps[p].name) {
                if !matches!(parent_def.category, StepCategory::FlowLogic | StepCategory::Trigger) {
                    report.push(Issue::Relation {
                        location: loc.clone(),
                        message: format!("parent {} is not a flow-logic step", parent_def.name),
                    });
                }
            }
        }
        if let Some(prev) = last_order.insert(step.parent, step.order) {
            if step.order <= prev {
                report.push(Issue::Relation {
                    location: loc.clone(),
                    message: format!("order {} does not increase after sibling order {prev}", step.order),
                });
            }
        }
        check_table(step, &loc, catalog, report);
    }
}

fn check_table(step: &WorkflowStep, loc: &str, catalog: &Catalog, report: &mut ValidationReport) {
    if let Some(table) = step.table() {
        if !catalog.has_table(table) {
            report.push(Issue::HallucinatedTable {
                location: loc.to_string(),
                name: table.to_string(),
            });
        }
    }
}

/// Reports duplicate or empty names and unknown common steps.
pub fn validate_catalog(catalog: &Catalog) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for (i, s) in catalog.steps.iter().enumerate() {
        if s.name.is_empty() {
            report.push(Issue::EmptyName {
                of: NameKind::Step,
                position: i,
            });
        } else if !seen.insert(s.name.as_str()) {
            report.push(Issue::DuplicateName {
                of: NameKind::Step,
                name: s.name.clone(),
            });
        }
    }
    let mut seen = HashSet::new();
    for (i, t) in catalog.tables.iter().enumerate() {
        if t.name.is_empty() {
            report.push(Issue::EmptyName {
                of: NameKind::Table,
                position: i,
            });
        } else if !seen.insert(t.name.as_str()) {
            report.push(Issue::DuplicateName {
                of: NameKind::Table,
                name: t.name.clone(),
            });
        }
    }
    let mut seen = HashSet::new();
    for c in &catalog.common_steps {
        if !catalog.has_step(c) {
            report.push(Issue::UnknownCommonStep { name: c.clone() });
        } else if !seen.insert(c.as_str()) {
            report.push(Issue::DuplicateName {
                of: NameKind::Step,
                name: c.clone(),
            });
        }
    }
    report
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CatalogError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CatalogError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CatalogError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CatalogError::Record {
            path: display.clone(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CatalogError> {
    let io_err = |source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>, CatalogError> {
    let samples: Vec<LabeledSample> = read_jsonl(path)?;
    if let Some(pos) = samples.iter().position(|s| s.query.trim().is_empty()) {
        return Err(CatalogError::Record {
            path: path.display().to_string(),
            line: pos + 1,
            message: "empty query".to_string(),
        });
    }
    Ok(samples)
}

pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<(), CatalogError> {
    write_jsonl(path, samples)
}
