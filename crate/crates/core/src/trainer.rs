//! Contrastive training of the retriever encoder.
//!
//! Positive pairs join a query with each step of its gold workflow and with
//! the trigger's table when there is one. Negatives are drawn per positive
//! pair from non-gold catalog items of the same kind, by one or more
//! strategies: uniform random, BM25 ranking, or cosine ranking under the
//! current encoder (refreshed every `hard_refresh_period` epochs).
//!
//! Loss, with cosine distance `D = 1 − cos(v_q, v_item)` and margin ½:
//! `L = ½ · (Y·D² + (1 − Y)·max(0, ½ − D)²)`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, LabeledSample};
use crate::encoder::{build_vocab, dot, EncodeError, EncoderModel, TableGradient};
use crate::lexical::{tokenize, Bm25Params, LexicalIndex};

pub const MARGIN: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("no positive training pairs could be built")]
    NoTrainingData,
    #[error("only {available} non-gold candidates for {query:?}, {requested} requested")]
    InsufficientCandidates {
        query: String,
        available: usize,
        requested: usize,
    },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Step,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query: String,
    pub item: String,
    pub item_text: String,
    pub label: u8,
    pub kind: ItemKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Random,
    Lexical,
    HardRefresh,
}

impl NegativeStrategy {
    pub const ALL: [NegativeStrategy; 3] = [Self::Random, Self::Lexical, Self::HardRefresh];
}

impl fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Lexical => "lexical",
            Self::HardRefresh => "hard_refresh",
        })
    }
}

impl FromStr for NegativeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "lexical" | "bm25" => Ok(Self::Lexical),
            "hard_refresh" | "hard" => Ok(Self::HardRefresh),
            other => Err(format!("unknown negative strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub strategies: Vec<NegativeStrategy>,
    pub seed: u64,
    pub hard_refresh_period: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 128,
            epochs: 10,
            negatives_per_positive: 4,
            strategies: NegativeStrategy::ALL.to_vec(),
            seed: 0,
            hard_refresh_period: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.negatives_per_positive == 0 || self.hard_refresh_period == 0 {
            return bad("batch_size, epochs, negatives_per_positive and hard_refresh_period must be positive");
        }
        if self.strategies.is_empty() {
            return bad("at least one negative strategy is required");
        }
        Ok(())
    }

    fn strategy_order(&self) -> Vec<NegativeStrategy> {
        let mut s = self.strategies.clone();
        s.sort();
        s.dedup();
        s
    }
}

pub fn contrastive_loss(distance: f64, label: u8) -> f64 {
    let y = f64::from(label);
    let hinge = (MARGIN - distance).max(0.0);
    0.5 * (y * distance * distance + (1.0 - y) * hinge * hinge)
}

/// dL/dD; zero on the flat side of the hinge (the subgradient at D = ½).
pub fn contrastive_loss_grad(distance: f64, label: u8) -> f64 {
    let y = f64::from(label);
    y * distance - (1.0 - y) * (MARGIN - distance).max(0.0)
}

/// Gold step names (one per occurrence) and the gold trigger table, if any.
pub fn gold_items(sample: &LabeledSample) -> (Vec<&str>, Option<&str>) {
    let steps = sample.gold.step_names().collect();
    let table = sample.gold.trigger.as_ref().and_then(|t| t.table());
    (steps, table)
}

/// Text fed to the encoder for a catalog item.
pub fn item_text(catalog: &Catalog, kind: ItemKind, name: &str) -> String {
    match kind {
        ItemKind::Step => catalog.step(name).map_or_else(|| name.to_string(), |s| s.prompt_line()),
        ItemKind::Table => name.to_string(),
    }
}

/// Vocabulary covering every catalog item text and every sample query.
pub fn corpus_vocab(catalog: &Catalog, samples: &[LabeledSample]) -> Vec<String> {
    let mut texts: Vec<String> = catalog.steps().iter().map(|s| item_text(catalog, ItemKind::Step, &s.name)).collect();
    texts.extend(catalog.tables().iter().map(|t| item_text(catalog, ItemKind::Table, &t.name)));
    texts.extend(samples.iter().map(|s| s.query.clone()));
    build_vocab(texts.iter().map(String::as_str))
}

pub fn build_positive_pairs(samples: &[LabeledSample], catalog: &Catalog) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for sample in samples {
        let (steps, table) = gold_items(sample);
        for step in steps {
            pairs.push(TrainingPair {
                query: sample.query.clone(),
                item: step.to_string(),
                item_text: item_text(catalog, ItemKind::Step, step),
                label: 1,
                kind: ItemKind::Step,
            });
        }
        if let Some(table) = table {
            pairs.push(TrainingPair {
                query: sample.query.clone(),
                item: table.to_string(),
                item_text: item_text(catalog, ItemKind::Table, table),
                label: 1,
                kind: ItemKind::Table,
            });
        }
    }
    pairs
}

/// Catalog items of one kind, in catalog (name) order.
struct ItemPool {
    kind: ItemKind,
    names: Vec<String>,
    texts: Vec<String>,
    lexical: LexicalIndex,
}

impl ItemPool {
    fn new(catalog: &Catalog, kind: ItemKind) -> Self {
        let (names, docs): (Vec<String>, Vec<_>) = match kind {
            ItemKind::Step => catalog
                .steps()
                .iter()
                .map(|s| (s.name.clone(), tokenize(&s.name).concat(tokenize(&s.description))))
                .unzip(),
            ItemKind::Table => catalog.tables().iter().map(|t| (t.name.clone(), tokenize(&t.name))).unzip(),
        };
        let texts = names.iter().map(|n| item_text(catalog, kind, n)).collect();
        Self {
            kind,
            names,
            texts,
            lexical: LexicalIndex::build(docs, Bm25Params::default()),
        }
    }

    fn non_gold(&self, gold: &HashSet<&str>) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| !gold.contains(self.names[i].as_str())).collect()
    }

    fn pair(&self, query: &str, item: usize) -> TrainingPair {
        TrainingPair {
            query: query.to_string(),
            item: self.names[item].clone(),
            item_text: self.texts[item].clone(),
            label: 0,
            kind: self.kind,
        }
    }
}

/// A query with its gold sets, ready for negative sampling.
struct QueryGold<'a> {
    query: &'a str,
    steps: HashSet<&'a str>,
    table: Option<&'a str>,
    positives: Vec<(ItemKind, usize)>,
}

/// Negative sampler over a fixed catalog.
pub struct NegativeSampler {
    steps: ItemPool,
    tables: ItemPool,
}

impl NegativeSampler {
    pub fn new(catalog: &Catalog) -> Self {
        Self {
            steps: ItemPool::new(catalog, ItemKind::Step),
            tables: ItemPool::new(catalog, ItemKind::Table),
        }
    }

    fn pool(&self, kind: ItemKind) -> &ItemPool {
        match kind {
            ItemKind::Step => &self.steps,
            ItemKind::Table => &self.tables,
        }
    }

    fn candidates(&self, q: &QueryGold<'_>, kind: ItemKind, count: usize) -> Result<Vec<usize>, TrainError> {
        let gold: HashSet<&str> = match kind {
            ItemKind::Step => q.steps.clone(),
            ItemKind::Table => q.table.into_iter().collect(),
        };
        let candidates = self.pool(kind).non_gold(&gold);
        if candidates.len() < count {
            return Err(TrainError::InsufficientCandidates {
                query: q.query.to_string(),
                available: candidates.len(),
                requested: count,
            });
        }
        Ok(candidates)
    }

    fn random(&self, q: &QueryGold<'_>, kind: ItemKind, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, TrainError> {
        let candidates = self.candidates(q, kind, count)?;
        Ok(index::sample(rng, candidates.len(), count).into_iter().map(|i| candidates[i]).collect())
    }

    /// Highest BM25-ranked non-gold items; topped up uniformly when fewer
    /// than `count` candidates share a term with the query.
    fn lexical(&self, q: &QueryGold<'_>, kind: ItemKind, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, TrainError> {
        let candidates = self.candidates(q, kind, count)?;
        let pool = self.pool(kind);
        let allowed: HashSet<usize> = candidates.iter().copied().collect();
        let mut picked: Vec<usize> = pool
            .lexical
            .topk(&tokenize(q.query), pool.names.len())
            .into_iter()
            .map(|(id, _)| id)
            .filter(|id| allowed.contains(id))
            .take(count)
            .collect();
        if picked.len() < count {
            let rest: Vec<usize> = candidates.into_iter().filter(|c| !picked.contains(c)).collect();
            let need = count - picked.len();
            picked.extend(index::sample(rng, rest.len(), need).into_iter().map(|i| rest[i]));
        }
        Ok(picked)
    }

    /// Highest cosine-ranked non-gold items under `encoder`.
    fn hard(&self, q: &QueryGold<'_>, kind: ItemKind, count: usize, item_vecs: &[Vec<f64>], encoder: &EncoderModel) -> Result<Vec<usize>, TrainError> {
        let candidates = self.candidates(q, kind, count)?;
        let qv = encoder.encode(q.query)?;
        let mut scored: Vec<(usize, f64)> = candidates.into_iter().map(|i| (i, dot(qv.values(), &item_vecs[i]))).collect();
        // pool names are sorted, so ties by id are ties by name
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().take(count).map(|(i, _)| i).collect())
    }

    fn encode_pool(&self, kind: ItemKind, encoder: &EncoderModel) -> Result<Vec<Vec<f64>>, TrainError> {
        self.pool(kind)
            .texts
            .iter()
            .map(|t| encoder.encode(t).map(|v| v.values().to_vec()).map_err(TrainError::from))
            .collect()
    }

    /// Negatives for every positive pair of `queries`, in positive order.
    /// Returns one list of item ids per positive.
    fn sample_for(
        &self,
        queries: &[QueryGold<'_>],
        strategy: NegativeStrategy,
        count: usize,
        rng: &mut ChaCha8Rng,
        encoder: Option<&EncoderModel>,
    ) -> Result<Vec<Vec<usize>>, TrainError> {
        let vecs = match (strategy, encoder) {
            (NegativeStrategy::HardRefresh, Some(enc)) => Some((self.encode_pool(ItemKind::Step, enc)?, self.encode_pool(ItemKind::Table, enc)?)),
            (NegativeStrategy::HardRefresh, None) => {
                return Err(TrainError::InvalidConfig("hard_refresh negatives need an encoder".into()))
            }
            _ => None,
        };
        let mut out = Vec::new();
        for q in queries {
            // rankings are per query; every positive of the query shares them
            let mut cache: [Option<Vec<usize>>; 2] = [None, None];
            for &(kind, _) in &q.positives {
                let slot = kind as usize;
                let negs = match strategy {
                    NegativeStrategy::Random => self.random(q, kind, count, rng)?,
                    NegativeStrategy::Lexical | NegativeStrategy::HardRefresh => {
                        if cache[slot].is_none() {
                            cache[slot] = Some(match strategy {
                                NegativeStrategy::Lexical => self.lexical(q, kind, count, rng)?,
                                _ => {
                                    let (sv, tv) = vecs.as_ref().expect("encoded above");
                                    let v = if kind == ItemKind::Step { sv } else { tv };
                                    self.hard(q, kind, count, v, encoder.expect("checked above"))?
                                }
                            });
                        }
                        cache[slot].clone().expect("filled above")
                    }
                };
                out.push(negs);
            }
        }
        Ok(out)
    }

    fn to_pairs(&self, queries: &[QueryGold<'_>], negatives: &[Vec<usize>]) -> Vec<TrainingPair> {
        let kinds = queries.iter().flat_map(|q| q.positives.iter().map(move |&(k, _)| (q.query, k)));
        kinds
            .zip(negatives)
            .flat_map(|((query, kind), ids)| ids.iter().map(move |&i| self.pool(kind).pair(query, i)))
            .collect()
    }
}

fn query_golds(samples: &[LabeledSample]) -> Vec<QueryGold<'_>> {
    samples
        .iter()
        .map(|s| {
            let (steps, table) = gold_items(s);
            let mut positives: Vec<(ItemKind, usize)> = (0..steps.len()).map(|i| (ItemKind::Step, i)).collect();
            if table.is_some() {
                positives.push((ItemKind::Table, 0));
            }
            QueryGold {
                query: &s.query,
                steps: steps.into_iter().collect(),
                table,
                positives,
            }
        })
        .collect()
}

/// Label-0 pairs, `count_per_positive` per positive pair, in positive order.
pub fn sample_negatives(
    samples: &[LabeledSample],
    catalog: &Catalog,
    strategy: NegativeStrategy,
    rng_seed: u64,
    count_per_positive: usize,
    encoder: Option<&EncoderModel>,
) -> Result<Vec<TrainingPair>, TrainError> {
    let sampler = NegativeSampler::new(catalog);
    let queries = query_golds(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let negatives = sampler.sample_for(&queries, strategy, count_per_positive, &mut rng, encoder)?;
    Ok(sampler.to_pairs(&queries, &negatives))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    /// Mean pair loss per epoch, measured before each batch's update.
    pub loss_history: Vec<f64>,
}

/// Mean loss over `batch` and its gradient with respect to the embedding table.
pub fn batch_loss_and_gradient(model: &EncoderModel, batch: &[TrainingPair]) -> Result<(f64, TableGradient), TrainError> {
    let mut grad = TableGradient::zeros(model.vocab_size(), model.dim());
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for pair in batch {
        let fq = model.forward(&pair.query)?;
        let fi = model.forward(&pair.item_text)?;
        let distance = 1.0 - dot(&fq.output, &fi.output);
        total += contrastive_loss(distance, pair.label);
        let g = contrastive_loss_grad(distance, pair.label) * scale;
        if g == 0.0 {
            continue;
        }
        // dD/dv_q = −v_item, dD/dv_item = −v_q
        let up_q: Vec<f64> = fi.output.iter().map(|x| -g * x).collect();
        let up_i: Vec<f64> = fq.output.iter().map(|x| -g * x).collect();
        model.backward_into(&fq, &up_q, &mut grad);
        model.backward_into(&fi, &up_i, &mut grad);
    }
    Ok((total * scale, grad))
}

/// Mini-batch gradient descent on the contrastive loss.
///
/// Random negatives are redrawn each epoch; lexical negatives are fixed;
/// hard negatives are recomputed every `hard_refresh_period` epochs. With
/// several strategies each contributes `negatives_per_positive` negatives to
/// every positive pair.
pub fn train(model: &EncoderModel, samples: &[LabeledSample], catalog: &Catalog, config: &TrainerConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let positives = build_positive_pairs(samples, catalog);
    if positives.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let sampler = NegativeSampler::new(catalog);
    let queries = query_golds(samples);
    let strategies = config.strategy_order();
    let count = config.negatives_per_positive;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = model.clone();

    let lexical = if strategies.contains(&NegativeStrategy::Lexical) {
        let mut lex_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c65_7869_6361_6c00);
        Some(sampler.to_pairs(&queries, &sampler.sample_for(&queries, NegativeStrategy::Lexical, count, &mut lex_rng, None)?))
    } else {
        None
    };
    let mut hard: Option<Vec<TrainingPair>> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut pairs = positives.clone();
        for &strategy in &strategies {
            match strategy {
                NegativeStrategy::Random => {
                    let negs = sampler.sample_for(&queries, strategy, count, &mut rng, None)?;
                    pairs.extend(sampler.to_pairs(&queries, &negs));
                }
                NegativeStrategy::Lexical => pairs.extend(lexical.iter().flatten().cloned()),
                NegativeStrategy::HardRefresh => {
                    if epoch % config.hard_refresh_period == 0 || hard.is_none() {
                        let negs = sampler.sample_for(&queries, strategy, count, &mut rng, Some(&model))?;
                        hard = Some(sampler.to_pairs(&queries, &negs));
                    }
                    pairs.extend(hard.iter().flatten().cloned());
                }
            }
        }
        pairs.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let (loss, grad) = batch_loss_and_gradient(&model, batch)?;
            epoch_loss += loss * batch.len() as f64;
            model.apply_gradient(&grad, config.learning_rate);
        }
        history.push(epoch_loss / pairs.len() as f64);
    }
    Ok(TrainOutcome { model, loss_history: history })
}

/// `epoch,mean_loss` CSV with a header line.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

/// Mean cosine over pairs with the given label.
pub fn mean_pair_similarity(model: &EncoderModel, pairs: &[TrainingPair], label: u8) -> Result<f64, TrainError> {
    let selected: Vec<&TrainingPair> = pairs.iter().filter(|p| p.label == label).collect();
    if selected.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in &selected {
        total += dot(model.encode(&p.query)?.values(), model.encode(&p.item_text)?.values());
    }
    Ok(total / selected.len() as f64)
}
