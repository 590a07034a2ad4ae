//! Hand-built three-sample evaluation fixture with canned rankings and
//! generator outputs. Expected values are written out by hand in the JSON.

#![allow(dead_code)]

use std::collections::HashMap;

use flowrag::catalog::{Catalog, LabeledSample, StepDefinition, TableName, WorkflowDocument};
use flowrag::eval::{evaluate_split, EvalConfig, EvalReport, Ranker};
use flowrag::generator::{GenerateError, Generator};
use flowrag::pipeline::{parse_prompt, PipelineError, Prompt, Rankings};
use serde::Deserialize;

pub const GOLDEN_JSON: &str = include_str!("../fixtures/eval_golden.json");

#[derive(Deserialize)]
struct Fixture {
    steps: Vec<StepDefinition>,
    tables: Vec<String>,
    config: EvalConfig,
    samples: Vec<FixtureSample>,
    expected: Expected,
}

#[derive(Deserialize)]
struct FixtureSample {
    query: String,
    gold: WorkflowDocument,
    ranked_steps: Vec<String>,
    ranked_tables: Vec<String>,
    raw: String,
}

#[derive(Deserialize)]
struct ExpectedSample {
    trigger_em: Option<f64>,
    bofs: f64,
    hs: Option<f64>,
    ht: Option<f64>,
    step_recall: Option<f64>,
    table_recall: Option<f64>,
}

#[derive(Deserialize)]
struct Expected {
    per_sample: Vec<ExpectedSample>,
    trigger_em: f64,
    bofs: f64,
    hs: f64,
    ht: f64,
    step_recall_at_k: f64,
    table_recall_at_k: f64,
    unique_steps_generated: usize,
    pct_unique_steps_hallucinated: f64,
    unique_tables_generated: usize,
    pct_unique_tables_hallucinated: f64,
}

struct CannedRanker(HashMap<String, Rankings>);

impl Ranker for CannedRanker {
    fn rank(&self, query: &str) -> Result<Rankings, PipelineError> {
        Ok(self.0[query].clone())
    }
}

struct CannedGenerator(HashMap<String, String>);

impl Generator for CannedGenerator {
    fn complete(&self, prompt: &Prompt) -> Result<String, GenerateError> {
        let parsed = parse_prompt(prompt).ok_or(GenerateError::InvalidPrompt)?;
        Ok(self.0[&parsed.query].clone())
    }
}

fn descending(names: &[String]) -> Vec<(String, f64)> {
    names.iter().enumerate().map(|(i, n)| (n.clone(), 1.0 - i as f64 * 0.1)).collect()
}

/// Runs the fixture; returns the report and every mismatch against the
/// expected values at `tol`.
pub fn run_golden(tol: f64) -> (EvalReport, Vec<String>) {
    let fx: Fixture = serde_json::from_str(GOLDEN_JSON).expect("fixture parses");
    let catalog = Catalog::new(fx.steps, fx.tables.into_iter().map(TableName::new).collect(), vec![]);
    let samples: Vec<LabeledSample> = fx
        .samples
        .iter()
        .map(|s| LabeledSample {
            query: s.query.clone(),
            gold: s.gold.clone(),
        })
        .collect();
    let ranker = CannedRanker(
        fx.samples
            .iter()
            .map(|s| {
                let r = Rankings {
                    steps: descending(&s.ranked_steps),
                    tables: descending(&s.ranked_tables),
                };
                (s.query.clone(), r)
            })
            .collect(),
    );
    let generator = CannedGenerator(fx.samples.iter().map(|s| (s.query.clone(), s.raw.clone())).collect());
    let report = evaluate_split(&samples, &ranker, &catalog, &generator, &fx.config);

    let mut bad = Vec::new();
    let mut check = |what: String, got: f64, want: f64| {
        if (got - want).abs() > tol {
            bad.push(format!("{what}: got {got}, want {want}"));
        }
    };
    let check_opt = |what: String, got: Option<f64>, want: Option<f64>, bad: &mut Vec<String>| match (got, want) {
        (Some(g), Some(w)) if (g - w).abs() <= tol => {}
        (None, None) => {}
        _ => bad.push(format!("{what}: got {got:?}, want {want:?}")),
    };
    let mut opt_bad = Vec::new();
    for (i, (got, want)) in report.per_sample.iter().zip(&fx.expected.per_sample).enumerate() {
        check(format!("sample {i} bofs"), got.bofs, want.bofs);
        check_opt(format!("sample {i} trigger_em"), got.trigger_em, want.trigger_em, &mut opt_bad);
        check_opt(format!("sample {i} hs"), got.hs, want.hs, &mut opt_bad);
        check_opt(format!("sample {i} ht"), got.ht, want.ht, &mut opt_bad);
        check_opt(format!("sample {i} step_recall"), got.step_recall, want.step_recall, &mut opt_bad);
        check_opt(format!("sample {i} table_recall"), got.table_recall, want.table_recall, &mut opt_bad);
    }
    let e = &fx.expected;
    check("trigger_em".into(), report.trigger_em, e.trigger_em);
    check("bofs".into(), report.bofs, e.bofs);
    check("hs".into(), report.hs, e.hs);
    check("ht".into(), report.ht, e.ht);
    check("step_recall_at_k".into(), report.step_recall_at_k, e.step_recall_at_k);
    check("table_recall_at_k".into(), report.table_recall_at_k, e.table_recall_at_k);
    check("pct_unique_steps_hallucinated".into(), report.pct_unique_steps_hallucinated, e.pct_unique_steps_hallucinated);
    check("pct_unique_tables_hallucinated".into(), report.pct_unique_tables_hallucinated, e.pct_unique_tables_hallucinated);
    bad.extend(opt_bad);
    if report.per_sample.len() != e.per_sample.len() {
        bad.push(format!("sample count {} vs {}", report.per_sample.len(), e.per_sample.len()));
    }
    if report.unique_steps_generated != e.unique_steps_generated {
        bad.push(format!("unique_steps_generated {} vs {}", report.unique_steps_generated, e.unique_steps_generated));
    }
    if report.unique_tables_generated != e.unique_tables_generated {
        bad.push(format!("unique_tables_generated {} vs {}", report.unique_tables_generated, e.unique_tables_generated));
    }
    (report, bad)
}
