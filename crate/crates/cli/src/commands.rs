//! Subcommand implementations. Each returns the process exit code.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use flowrag::catalog::{parse_workflow, read_samples, validate_catalog, Catalog, Issue, STEPS_FILE, TABLES_FILE};
use flowrag::datagen::{frequent_steps, generate_corpus, GenSpec, SyntheticCorpus};
use flowrag::encoder::{fingerprint_hex, EncoderModel, TextEncoder};
use flowrag::eval::{evaluate_split, EvalConfig};
use flowrag::generator::{generate, GenerateError, GeneratorBinding};
use flowrag::index::{build_index, VectorIndex};
use flowrag::pipeline::{assemble_prompt, Retriever};
use flowrag::trainer::{corpus_vocab, loss_history_csv, train, ItemKind, NegativeStrategy, TrainerConfig};
use tracing::info;

use crate::config::ServiceConfig;
use crate::{
    BuildIndexArgs, CatalogCommand, Command, DatagenArgs, EvaluateArgs, GenerateArgs, GeneratorArgs, ListKind, RetrieveArgs, RetrieverArgs,
    ServeArgs, TrainArgs, EXIT_FAILURE, EXIT_OK,
};

pub const STEP_INDEX_FILE: &str = "steps.flix";
pub const TABLE_INDEX_FILE: &str = "tables.flix";

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Datagen(a) => datagen(&a),
        Command::Catalog(CatalogCommand::Validate { data_dir }) => validate(&data_dir),
        Command::TrainRetriever(a) => train_retriever(&a),
        Command::BuildIndex(a) => build_indices(&a),
        Command::Retrieve(a) => retrieve(&a),
        Command::Generate(a) => generate_one(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Serve(a) => serve(&a),
    }
}

pub fn load_catalog(dir: &Path) -> Result<Catalog> {
    Catalog::load_dir(dir).with_context(|| format!("cannot load catalog from {}", dir.display()))
}

/// Loads the encoder and both indices, checking fingerprints and that the
/// indices cover exactly the catalog's items.
pub fn load_retriever(model: &Path, index_dir: &Path, catalog: &Catalog) -> Result<Retriever> {
    let encoder = EncoderModel::load(model).with_context(|| format!("cannot load encoder {}", model.display()))?;
    let fp = encoder.fingerprint();
    let steps = VectorIndex::load(&index_dir.join(STEP_INDEX_FILE), ItemKind::Step, Some(&fp))
        .with_context(|| format!("step index in {} does not match encoder {}", index_dir.display(), fingerprint_hex(&fp)))?;
    let tables = VectorIndex::load(&index_dir.join(TABLE_INDEX_FILE), ItemKind::Table, Some(&fp))
        .with_context(|| format!("table index in {} does not match encoder {}", index_dir.display(), fingerprint_hex(&fp)))?;
    let step_names: Vec<&str> = catalog.steps().iter().map(|s| s.name.as_str()).collect();
    let table_names: Vec<&str> = catalog.tables().iter().map(|t| t.name.as_str()).collect();
    if steps.ids().iter().map(String::as_str).ne(step_names.iter().copied()) {
        bail!("step index in {} was built from a different catalog", index_dir.display());
    }
    if tables.ids().iter().map(String::as_str).ne(table_names.iter().copied()) {
        bail!("table index in {} was built from a different catalog", index_dir.display());
    }
    Ok(Retriever::new(encoder, steps, tables)?)
}

fn retriever_from(files: &RetrieverArgs) -> Result<(Arc<Catalog>, Retriever)> {
    let catalog = load_catalog(&files.data_dir)?;
    let retriever = load_retriever(&files.model, &files.index_dir, &catalog)?;
    Ok((Arc::new(catalog), retriever))
}

fn binding(args: &GeneratorArgs) -> GeneratorBinding {
    GeneratorBinding {
        kind: args.generator,
        endpoint: args.endpoint.clone(),
        timeout_ms: args.timeout_ms,
        max_tokens: args.max_tokens,
        table_fallback: args.table_fallback,
    }
}

fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    corpus.save(dir).with_context(|| format!("cannot write corpus to {}", dir.display()))
}

fn datagen(a: &DatagenArgs) -> Result<i32> {
    let spec = GenSpec {
        seed: a.seed,
        step_count: a.steps,
        table_count: a.tables,
        train_count: a.train,
        test_count: a.test,
        common_count: a.common,
        ..GenSpec::default()
    };
    let mut corpus = generate_corpus(&spec)?;
    let common = frequent_steps(&corpus.train, a.common);
    corpus.catalog = corpus.catalog.clone().with_common_steps(common);
    write_corpus(&corpus, &a.out_dir)?;
    println!(
        "wrote {} steps, {} tables, {} train and {} test samples to {}",
        corpus.catalog.steps().len(),
        corpus.catalog.tables().len(),
        corpus.train.len(),
        corpus.test.len(),
        a.out_dir.display()
    );
    Ok(EXIT_OK)
}

fn describe(issue: &Issue) -> String {
    serde_json::to_string(issue).expect("issues serialize")
}

fn validate(dir: &Path) -> Result<i32> {
    let catalog = load_catalog(dir)?;
    let mut problems = 0;
    for issue in &validate_catalog(&catalog).issues {
        println!("catalog: {}", describe(issue));
        problems += 1;
    }
    let mut splits: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .filter(|p| p.file_name().is_some_and(|n| n != STEPS_FILE && n != TABLES_FILE))
        .collect();
    splits.sort();
    for split in &splits {
        let samples = read_samples(split)?;
        for (i, s) in samples.iter().enumerate() {
            let issues = match parse_workflow(&s.gold.to_json(), &catalog) {
                Ok((_, report)) => report.issues,
                Err(e) => vec![Issue::Parse {
                    location: "document".into(),
                    message: e.to_string(),
                }],
            };
            for issue in &issues {
                println!("{}:{}: {}", split.display(), i + 1, describe(issue));
                problems += 1;
            }
        }
    }
    println!(
        "{} steps, {} tables, {} split file(s), {} issue(s)",
        catalog.steps().len(),
        catalog.tables().len(),
        splits.len(),
        problems
    );
    Ok(if problems == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn train_retriever(a: &TrainArgs) -> Result<i32> {
    let catalog = load_catalog(&a.data_dir)?;
    let split = a.train.clone().unwrap_or_else(|| a.data_dir.join("train.jsonl"));
    let samples = read_samples(&split)?;
    let defaults = TrainerConfig::default();
    let config = TrainerConfig {
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        negatives_per_positive: a.negatives.unwrap_or(defaults.negatives_per_positive),
        strategies: if a.strategies.is_empty() { NegativeStrategy::ALL.to_vec() } else { a.strategies.clone() },
        seed: a.seed,
        hard_refresh_period: a.refresh_period.unwrap_or(defaults.hard_refresh_period),
    };
    let initial = EncoderModel::random(corpus_vocab(&catalog, &samples), a.dim, a.seed);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let start = Instant::now();
    let outcome = train(&initial, &samples, &catalog, &config)?;
    outcome.model.save(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    std::fs::write(&csv_path, loss_history_csv(&outcome.loss_history)).with_context(|| format!("cannot write {}", csv_path.display()))?;
    println!(
        "trained {} epochs in {:.1}s, final loss {:.6}, encoder {}",
        config.epochs,
        start.elapsed().as_secs_f64(),
        outcome.loss_history.last().copied().unwrap_or(0.0),
        fingerprint_hex(&outcome.model.fingerprint())
    );
    Ok(EXIT_OK)
}

fn build_indices(a: &BuildIndexArgs) -> Result<i32> {
    let catalog = load_catalog(&a.data_dir)?;
    let encoder = EncoderModel::load(&a.model).with_context(|| format!("cannot load encoder {}", a.model.display()))?;
    let fp = fingerprint_hex(&encoder.fingerprint());
    std::fs::create_dir_all(&a.out_dir)?;
    for (kind, file) in [(ItemKind::Step, STEP_INDEX_FILE), (ItemKind::Table, TABLE_INDEX_FILE)] {
        let index = match build_index(&encoder, &catalog, kind) {
            Ok(index) => index,
            Err(e) => {
                eprintln!("error: encoder {fp} does not match catalog {}: {e}", a.data_dir.display());
                return Ok(EXIT_FAILURE);
            }
        };
        index.save(&a.out_dir.join(file))?;
    }
    println!("indexed {} steps and {} tables with encoder {fp}", catalog.steps().len(), catalog.tables().len());
    Ok(EXIT_OK)
}

fn retrieve(a: &RetrieveArgs) -> Result<i32> {
    let (catalog, retriever) = retriever_from(&a.files)?;
    let suggestions = retriever.retrieve_suggestions(&a.query, &catalog, a.k, a.k)?;
    let list = match a.kind {
        ListKind::Step => &suggestions.steps,
        ListKind::Table => &suggestions.tables,
    };
    for s in list {
        println!("{}\t{:.6}", s.name, s.score);
    }
    Ok(EXIT_OK)
}

fn generate_one(a: &GenerateArgs) -> Result<i32> {
    let (catalog, retriever) = retriever_from(&a.files)?;
    let suggestions = retriever.retrieve_suggestions(&a.query, &catalog, a.k_steps, a.k_tables)?;
    let prompt = assemble_prompt(&suggestions, &a.query, &catalog);
    let generator = binding(&a.generator).instantiate(catalog.clone())?;
    match generate(generator.as_ref(), &prompt, &catalog) {
        Ok(g) => {
            println!("{}", serde_json::to_string_pretty(&g.document)?);
            for issue in &g.report.issues {
                eprintln!("issue: {}", describe(issue));
            }
            Ok(if g.report.is_clean() { EXIT_OK } else { EXIT_FAILURE })
        }
        Err(GenerateError::MalformedDocument { raw, source }) => {
            eprintln!("error: generated text is not a workflow document: {source}");
            eprintln!("{raw}");
            Ok(EXIT_FAILURE)
        }
        Err(e) => Err(e.into()),
    }
}

fn evaluate(a: &EvaluateArgs) -> Result<i32> {
    let samples = read_samples(&a.split)?;
    let data_dir = match &a.data_dir {
        Some(d) => d.clone(),
        None => a.split.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let catalog = Arc::new(load_catalog(&data_dir)?);
    let retriever = load_retriever(&a.model, &a.index_dir, &catalog)?;
    let generator = binding(&a.generator).instantiate(catalog.clone())?;
    let config = EvalConfig {
        k_steps: a.k_steps,
        k_tables: a.k_tables,
        recall_mode: a.recall_mode,
        suggestions: a.suggestions,
        ..EvalConfig::default()
    };
    let report = evaluate_split(&samples, &retriever, &catalog, generator.as_ref(), &config);
    std::fs::write(&a.report, serde_json::to_string_pretty(&report.without_samples())? + "\n")
        .with_context(|| format!("cannot write {}", a.report.display()))?;
    if let Some(path) = &a.per_sample {
        let mut out = String::new();
        for record in &report.per_sample {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!(
        "samples {}  trigger_em {:.4}  bofs {:.4}  hs {:.4}  ht {:.4}  step_recall {:.4}  table_recall {:.4}",
        report.sample_count, report.trigger_em, report.bofs, report.hs, report.ht, report.step_recall_at_k, report.table_recall_at_k
    );
    Ok(EXIT_OK)
}

fn serve(a: &ServeArgs) -> Result<i32> {
    let path = ServiceConfig::resolve_path(a.config.as_deref())?;
    let mut config = ServiceConfig::load(&path)?;
    if let Some(bind) = &a.bind {
        config.bind = bind.clone();
    }
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let state = crate::service::AppState::from_config(&config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.bind)
            .await
            .with_context(|| format!("cannot bind {}", config.bind))?;
        info!(addr = %listener.local_addr()?, "serving");
        crate::service::serve(listener, state).await
    })?;
    Ok(EXIT_OK)
}
