//! Tokenization and an Okapi BM25 ranker.
//!
//! BM25(D, Q) = Σ idf(q) · tf(q, D) · (k1 + 1) / (tf(q, D) + k1 · (1 − b + b · |D| / avgdl))
//! with idf(q) = ln(1 + (N − df(q) + 0.5) / (df(q) + 0.5)).

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexicalError {
    #[error("document {0} is not indexed")]
    UnknownDoc(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn concat(mut self, other: TokenSeq) -> TokenSeq {
        self.0.extend(other.0);
        self
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LexicalIndex {
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_lengths: Vec<u32>,
    total_length: u64,
    params: Bm25Params,
}

impl LexicalIndex {
    pub fn new(params: Bm25Params) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    /// Indexes documents with ids `0..docs.len()` in iteration order.
    pub fn build(docs: impl IntoIterator<Item = TokenSeq>, params: Bm25Params) -> Self {
        let mut index = Self::new(params);
        for doc in docs {
            index.add(&doc);
        }
        index
    }

    pub fn add(&mut self, doc: &TokenSeq) -> usize {
        let id = self.doc_lengths.len();
        let mut tf: HashMap<&str, u32> = HashMap::new();
        for t in doc.iter() {
            *tf.entry(t).or_default() += 1;
        }
        for (term, count) in tf {
            self.postings.entry(term.to_string()).or_default().push((id, count));
        }
        self.doc_lengths.push(doc.len() as u32);
        self.total_length += doc.len() as u64;
        id
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        if self.doc_lengths.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.doc_lengths.len() as f64
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn term_frequency(&self, term: &str, doc: usize) -> u32 {
        self.postings
            .get(term)
            .and_then(|p| p.iter().find(|(d, _)| *d == doc))
            .map_or(0, |&(_, tf)| tf)
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let avg = self.avg_doc_length();
        let rel_len = if avg > 0.0 {
            self.doc_lengths[doc] as f64 / avg
        } else {
            1.0
        };
        let tf = tf as f64;
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * rel_len))
    }

    pub fn score(&self, query: &TokenSeq, doc: usize) -> Result<f64, LexicalError> {
        if doc >= self.doc_count() {
            return Err(LexicalError::UnknownDoc(doc));
        }
        let mut score = 0.0;
        for term in query.iter() {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            if let Some(&(_, tf)) = postings.iter().find(|(d, _)| *d == doc) {
                score += self.idf(postings.len()) * self.term_weight(tf, doc);
            }
        }
        Ok(score)
    }

    /// Scores of every document, accumulated over postings lists.
    pub fn score_all(&self, query: &TokenSeq) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count()];
        for term in query.iter() {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(postings.len());
            for &(doc, tf) in postings {
                scores[doc] += idf * self.term_weight(tf, doc);
            }
        }
        scores
    }

    /// Top-`k` documents with a positive score; ties go to the lower id.
    pub fn topk(&self, query: &TokenSeq, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .score_all(query)
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}
