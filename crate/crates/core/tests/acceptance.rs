//! Acceptance suite. Runs every criterion, prints one `[PASS]`/`[FAIL]` line
//! each and exits non-zero when any criterion fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use flowrag::catalog::Catalog;
use flowrag::datagen::{generate_corpus, GenSpec, SyntheticCorpus};
use flowrag::encoder::{build_vocab, EncoderModel};
use flowrag::eval::{evaluate_split, retrieval_recall, EvalConfig, SuggestionMode};
use flowrag::generator::OracleGenerator;
use flowrag::index::VectorIndex;
use flowrag::lexical::tokenize;
use flowrag::pipeline::Retriever;
use flowrag::trainer::{batch_loss_and_gradient, contrastive_loss, train, ItemKind, NegativeStrategy, TrainerConfig, TrainingPair};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 32;
const MODEL_SEED: u64 = 7;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn train_config(strategies: Vec<NegativeStrategy>) -> TrainerConfig {
    TrainerConfig {
        learning_rate: 2.0,
        batch_size: 32,
        epochs: 20,
        negatives_per_positive: 8,
        strategies,
        seed: 0,
        hard_refresh_period: 1,
    }
}

fn initial_model(corpus: &SyntheticCorpus) -> EncoderModel {
    let mut texts: Vec<String> = corpus.catalog.steps().iter().map(|s| s.prompt_line()).collect();
    texts.extend(corpus.catalog.tables().iter().map(|t| t.name.clone()));
    texts.extend(corpus.train.iter().map(|s| s.query.clone()));
    EncoderModel::random(build_vocab(texts.iter().map(String::as_str)), DIM, MODEL_SEED)
}

fn pair_loss(model: &EncoderModel, pair: &TrainingPair) -> f64 {
    let q = model.encode(&pair.query).unwrap();
    let i = model.encode(&pair.item_text).unwrap();
    let cos: f64 = q.values().iter().zip(i.values()).map(|(a, b)| a * b).sum();
    contrastive_loss(1.0 - cos, pair.label)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let tokens: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut fixtures = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while fixtures < 120 && attempts < 10_000 {
        attempts += 1;
        let mut model = EncoderModel::random(tokens.clone(), 8, rng.random());
        let text = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(1..=5);
            (0..n).map(|_| tokens.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
        };
        let pair = TrainingPair {
            query: text(&mut rng),
            item: String::new(),
            item_text: text(&mut rng),
            label: rng.random_range(0..=1),
            kind: ItemKind::Step,
        };
        let (Ok(q), Ok(i)) = (model.encode(&pair.query), model.encode(&pair.item_text)) else {
            continue;
        };
        let d = 1.0 - q.values().iter().zip(i.values()).map(|(a, b)| a * b).sum::<f64>();
        // central differences straddling the hinge are not meaningful
        if pair.label == 0 && (d - 0.5).abs() < 1e-3 {
            continue;
        }
        let (_, analytic) = batch_loss_and_gradient(&model, std::slice::from_ref(&pair)).unwrap();
        let mut numeric = vec![0.0; analytic.values.len()];
        for (w, slot) in numeric.iter_mut().enumerate() {
            let orig = model.weights()[w];
            model.weights_mut()[w] = orig + h;
            let up = pair_loss(&model, &pair);
            model.weights_mut()[w] = orig - h;
            let down = pair_loss(&model, &pair);
            model.weights_mut()[w] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.values.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic.values).max(norm(&numeric));
        let rel = if scale < 1e-12 { 0.0 } else { norm(&diff) / scale };
        worst = worst.max(rel);
        fixtures += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        "gradient correctness",
        fixtures >= 100 && worst < 1e-4 && elapsed < Duration::from_secs(10),
        format!("{fixtures} fixtures, max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn loss_spot_values() -> Outcome {
    // (label, distance, loss)
    let cases = [(1, 0.0, 0.0), (0, 0.5, 0.0), (1, 0.4, 0.08), (0, 0.2, 0.045)];
    let mut worst: f64 = 0.0;
    for (label, d, want) in cases {
        worst = worst.max((contrastive_loss(d, label) - want).abs());
    }
    outcome("loss spot values", worst <= 1e-12, format!("max abs error {worst:.1e}"))
}

struct Trained {
    step_recall: f64,
    retriever: Retriever,
    checkpoint: Vec<u8>,
}

fn fine_tuning(corpus: &SyntheticCorpus, cfg: &EvalConfig) -> (Outcome, Trained) {
    let start = Instant::now();
    let model = initial_model(corpus);
    let untrained = retrieval_recall(&corpus.test, &Retriever::build(model.clone(), &corpus.catalog).unwrap(), cfg);
    let out = train(&model, &corpus.train, &corpus.catalog, &train_config(NegativeStrategy::ALL.to_vec())).unwrap();
    let checkpoint = out.model.to_bytes();
    let retriever = Retriever::build(out.model, &corpus.catalog).unwrap();
    let trained = retrieval_recall(&corpus.test, &retriever, cfg);
    let elapsed = start.elapsed();
    let pass = trained.0 >= untrained.0 + 0.30 && trained.0 >= 0.90 && trained.1 >= 0.90 && elapsed < Duration::from_secs(180);
    let o = outcome(
        "fine-tuning improves retrieval",
        pass,
        format!(
            "step R@15 {:.3} -> {:.3}, table R@10 {:.3} -> {:.3}, {:.1}s",
            untrained.0,
            trained.0,
            untrained.1,
            trained.1,
            elapsed.as_secs_f64()
        ),
    );
    (
        o,
        Trained {
            step_recall: trained.0,
            retriever,
            checkpoint,
        },
    )
}

fn negative_sampling_trend(corpus: &SyntheticCorpus, cfg: &EvalConfig, combined: f64) -> Outcome {
    let model = initial_model(corpus);
    let mut singles = Vec::new();
    for s in NegativeStrategy::ALL {
        let out = train(&model, &corpus.train, &corpus.catalog, &train_config(vec![s])).unwrap();
        let r = Retriever::build(out.model, &corpus.catalog).unwrap();
        singles.push((s, retrieval_recall(&corpus.test, &r, cfg).0));
    }
    let best = singles.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let detail = singles.iter().map(|(s, r)| format!("{s} {r:.3}")).collect::<Vec<_>>().join(", ");
    outcome(
        "negative-sampling trend",
        combined >= best - 0.02,
        format!("combined {combined:.3} vs {detail}"),
    )
}

fn round_trip(corpus: &SyntheticCorpus, retriever: &Retriever) -> Outcome {
    let catalog = Arc::new(corpus.catalog.clone());
    let oracle = OracleGenerator::new(catalog.clone());
    let cfg = EvalConfig {
        suggestions: SuggestionMode::GoldInjected,
        ..EvalConfig::default()
    };
    let r = evaluate_split(&corpus.test, retriever, &catalog, &oracle, &cfg);
    let errors = r.per_sample.iter().filter(|s| s.error.is_some()).count();
    outcome(
        "end-to-end round trip",
        r.trigger_em == 1.0 && r.bofs == 1.0 && r.hs == 0.0 && r.ht == 0.0 && errors == 0,
        format!("trigger EM {}, BofS {}, HS {}, HT {}, {} samples", r.trigger_em, r.bofs, r.hs, r.ht, r.sample_count),
    )
}

fn hallucination_suppression(corpus: &SyntheticCorpus, retriever: &Retriever) -> Outcome {
    let catalog = Arc::new(corpus.catalog.clone());
    let oracle = OracleGenerator::new(catalog.clone()).with_table_fallback(true);
    let with = evaluate_split(&corpus.test, retriever, &catalog, &oracle, &EvalConfig::default());
    let without = evaluate_split(
        &corpus.test,
        retriever,
        &catalog,
        &oracle,
        &EvalConfig {
            suggestions: SuggestionMode::None,
            ..EvalConfig::default()
        },
    );
    outcome(
        "hallucination suppression",
        with.ht < without.ht,
        format!("HT with suggestions {:.3}, without {:.3}", with.ht, without.ht),
    )
}

fn metric_golden_file() -> Outcome {
    let (_, bad) = common::run_golden(1e-9);
    let detail = if bad.is_empty() { "all values within 1e-9".to_string() } else { bad.join("; ") };
    outcome("metric golden file", bad.is_empty(), detail)
}

fn full_scan(model: &EncoderModel, texts: &[(String, String)], query: &str) -> Vec<(String, f64)> {
    let q = model.encode(query).unwrap();
    let mut scored: Vec<(String, f64)> = texts
        .iter()
        .map(|(name, text)| {
            let v = model.encode(text).unwrap();
            let mut s = 0.0;
            for (x, y) in v.values().iter().zip(q.values()) {
                s += f64::from(*x as f32) * y;
            }
            (name.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored
}

fn exactness_and_persistence(corpus: &SyntheticCorpus, trained: &Trained) -> Outcome {
    let mut problems = Vec::new();
    let r = &trained.retriever;
    let model = r.encoder();
    let catalog: &Catalog = &corpus.catalog;
    let step_texts: Vec<(String, String)> = catalog.steps().iter().map(|s| (s.name.clone(), s.prompt_line())).collect();
    let table_texts: Vec<(String, String)> = catalog.tables().iter().map(|t| (t.name.clone(), t.name.clone())).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vocab = model.tokens();
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let query = (0..n).map(|_| vocab.choose(&mut rng).unwrap().as_str()).collect::<Vec<_>>().join(" ");
        let Ok(v) = model.encode(&query) else { continue };
        for (index, texts) in [(r.step_index(), &step_texts), (r.table_index(), &table_texts)] {
            let expected = full_scan(model, texts, &query);
            for k in 0..=index.len() + 1 {
                let got = index.topk(&v, k).unwrap();
                if got[..] != expected[..k.min(expected.len())] {
                    problems.push(format!("topk mismatch for {query:?} at k={k}"));
                    break;
                }
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    for (name, index, kind) in [("steps.flix", r.step_index(), ItemKind::Step), ("tables.flix", r.table_index(), ItemKind::Table)] {
        let path = dir.path().join(name);
        index.save(&path).unwrap();
        let loaded = VectorIndex::load(&path, kind, Some(&index.fingerprint().clone())).unwrap();
        if loaded.to_bytes() != std::fs::read(&path).unwrap() || loaded.to_bytes() != index.to_bytes() {
            problems.push(format!("{name} round trip changed bytes"));
        }
    }
    let ckpt = dir.path().join("encoder.flrg");
    model.save(&ckpt).unwrap();
    let reloaded = EncoderModel::load(&ckpt).unwrap();
    if reloaded.to_bytes() != std::fs::read(&ckpt).unwrap() || reloaded != *model {
        problems.push("checkpoint round trip changed the model".into());
    }

    let again = train(&initial_model(corpus), &corpus.train, &corpus.catalog, &train_config(NegativeStrategy::ALL.to_vec())).unwrap();
    if again.model.to_bytes() != trained.checkpoint {
        problems.push("same-seed training produced a different checkpoint".into());
    }

    let detail = if problems.is_empty() {
        "100 queries x all k match full scan; index and checkpoint round trips byte-identical; same-seed checkpoints identical".to_string()
    } else {
        problems.join("; ")
    };
    outcome("exactness and persistence", problems.is_empty(), detail)
}

fn main() {
    let corpus = generate_corpus(&GenSpec::default()).expect("default corpus");
    let cfg = EvalConfig::default();
    assert!(corpus.test.iter().all(|s| !tokenize(&s.query).is_empty()));

    let mut outcomes = vec![gradient_correctness(), loss_spot_values()];
    let (tuning, trained) = fine_tuning(&corpus, &cfg);
    outcomes.push(tuning);
    outcomes.push(negative_sampling_trend(&corpus, &cfg, trained.step_recall));
    outcomes.push(round_trip(&corpus, &trained.retriever));
    outcomes.push(hallucination_suppression(&corpus, &trained.retriever));
    outcomes.push(metric_golden_file());
    outcomes.push(exactness_and_persistence(&corpus, &trained));

    let failed = outcomes.iter().filter(|o| !o.pass).count();
    for o in &outcomes {
        println!("[{}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    println!("acceptance: {} passed, {} failed", outcomes.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
