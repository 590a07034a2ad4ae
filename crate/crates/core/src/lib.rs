//! Retrieval-augmented workflow generation.
//!
//! A small dense retriever (mean-pooled learned token embeddings) picks
//! candidate steps and tables from a catalog; the candidates are packed into a
//! prompt; a generator turns the prompt into a JSON workflow document, which
//! is validated against the catalog and scored.

pub mod catalog;
pub mod datagen;
pub mod encoder;
pub mod eval;
pub mod generator;
pub mod index;
pub mod lexical;
pub mod pipeline;
pub mod trainer;

pub use catalog::{parse_workflow, Catalog, CatalogError, LabeledSample, StepCategory, StepDefinition, TableName, ValidationReport, WorkflowDocument, WorkflowStep};
pub use encoder::{EmbeddingVector, EncodeError, EncoderModel, TextEncoder};
pub use eval::{evaluate_split, EvalConfig, EvalReport, Ranker, RecallMode, SuggestionMode};
pub use generator::{generate, GenerateError, Generator, GeneratorBinding, GeneratorKind, OracleGenerator, RemoteGenerator};
pub use index::{build_index, IndexError, VectorIndex};
pub use lexical::{tokenize, LexicalIndex};
pub use pipeline::{assemble_prompt, Prompt, Rankings, Retriever, Suggestions};
pub use trainer::{train, NegativeStrategy, TrainError, TrainOutcome, TrainerConfig};
