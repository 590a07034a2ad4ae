//! Desk-scale retriever encoder: `normalize(mean(rows of the query tokens))`.
//!
//! The token encoder is a learned embedding table. Out-of-vocabulary tokens
//! are skipped; a text with no known tokens cannot be encoded.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "FLRG" | version: u16 | dim: u32 | vocab count: u32 |
//! repeated { token length: u32 | token UTF-8 bytes | dim × f32 }
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexical::tokenize;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLRG";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DEFAULT_DIM: usize = 32;
const MIN_NORM: f64 = 1e-9;

pub type Fingerprint = [u8; 32];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("no in-vocabulary tokens in {0:?}")]
    NoKnownTokens(String),
    #[error("pooled vector norm {norm:e} is too small to normalize")]
    NearZeroVector { norm: f64 },
    #[error("upstream gradient has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values`; fails when the norm is below `1e-9`.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EncodeError> {
        let norm = l2(&values);
        if norm < MIN_NORM {
            return Err(EncodeError::NearZeroVector { norm });
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of two unit vectors.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    dot(&a.0, &b.0).clamp(-1.0, 1.0)
}

/// Anything that maps text to unit vectors for indexing and retrieval.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError>;
    fn fingerprint(&self) -> Fingerprint;
}

/// Sorted, deduplicated token list over `texts`.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut tokens: Vec<String> = texts.into_iter().flat_map(|t| tokenize(t).into_inner()).collect();
    tokens.sort();
    tokens.dedup();
    tokens
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    tokens: Vec<String>,
    vocab: HashMap<String, usize>,
    weights: Vec<f64>,
    dim: usize,
}

/// Pre-normalization state of a forward pass.
pub(crate) struct Forward {
    pub ids: Vec<usize>,
    pub norm: f64,
    pub output: Vec<f64>,
}

/// Gradient with respect to the embedding table, dense and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGradient {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl TableGradient {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

impl EncoderModel {
    /// Rows drawn from N(0, 1/dim) with a seeded ChaCha stream.
    pub fn random(mut tokens: Vec<String>, dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "embedding dimension must be at least 2");
        tokens.sort();
        tokens.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let weights = (0..tokens.len() * dim)
            .map(|_| normal.sample(&mut rng) as f32 as f64)
            .collect();
        Self::assemble(tokens, dim, weights)
    }

    /// Builds a model from explicit rows (`rows[i]` is the row of `tokens[i]`).
    pub fn from_rows(tokens: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        assert_eq!(tokens.len(), rows.len(), "one row per token");
        let dim = rows.first().map_or(DEFAULT_DIM, Vec::len);
        assert!(dim >= 2, "embedding dimension must be at least 2");
        assert!(rows.iter().all(|r| r.len() == dim), "ragged rows");
        let weights = rows.into_iter().flatten().collect();
        Self::assemble(tokens, dim, weights)
    }

    fn assemble(tokens: Vec<String>, dim: usize, weights: Vec<f64>) -> Self {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let prev = vocab.insert(t.clone(), i);
            assert!(prev.is_none(), "duplicate vocabulary token {t:?}");
        }
        Self {
            tokens,
            vocab,
            weights,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.weights[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.weights[id * self.dim..(id + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// In-vocabulary token ids of `text`, one per occurrence.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().filter_map(|t| self.token_id(t)).collect()
    }

    pub(crate) fn forward(&self, text: &str) -> Result<Forward, EncodeError> {
        let ids = self.token_ids(text);
        if ids.is_empty() {
            return Err(EncodeError::NoKnownTokens(text.to_string()));
        }
        let mut pooled = vec![0.0; self.dim];
        for &id in &ids {
            for (p, w) in pooled.iter_mut().zip(self.row(id)) {
                *p += w;
            }
        }
        let count = ids.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= count);
        let norm = l2(&pooled);
        if norm < MIN_NORM {
            return Err(EncodeError::NearZeroVector { norm });
        }
        let output = pooled.into_iter().map(|p| p / norm).collect();
        Ok(Forward { ids, norm, output })
    }

    pub fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        self.forward(text).map(|f| EmbeddingVector(f.output))
    }

    /// Accumulates d(upstream · encode(text))/d(table) into `grad`.
    ///
    /// Through the normalization the pooled gradient is (g − v(v·g)) / ‖x‖;
    /// mean pooling then hands each token occurrence 1/T of it.
    pub(crate) fn backward_into(&self, fwd: &Forward, upstream: &[f64], grad: &mut TableGradient) {
        let v = &fwd.output;
        let vg = dot(v, upstream);
        let scale = 1.0 / (fwd.norm * fwd.ids.len() as f64);
        for &id in &fwd.ids {
            let row = &mut grad.values[id * self.dim..(id + 1) * self.dim];
            for ((r, g), vi) in row.iter_mut().zip(upstream).zip(v) {
                *r += (g - vi * vg) * scale;
            }
        }
    }

    pub fn encode_gradient(&self, text: &str, upstream: &[f64]) -> Result<TableGradient, EncodeError> {
        if upstream.len() != self.dim {
            return Err(EncodeError::DimensionMismatch {
                expected: self.dim,
                got: upstream.len(),
            });
        }
        let fwd = self.forward(text)?;
        let mut grad = TableGradient::zeros(self.vocab_size(), self.dim);
        self.backward_into(&fwd, upstream, &mut grad);
        Ok(grad)
    }

    /// `weights -= lr · grad`, then rounds every weight to f32 precision so the
    /// in-memory model always equals its checkpoint.
    pub fn apply_gradient(&mut self, grad: &TableGradient, learning_rate: f64) {
        assert_eq!(grad.values.len(), self.weights.len());
        for (w, g) in self.weights.iter_mut().zip(&grad.values) {
            *w = (*w - learning_rate * g) as f32 as f64;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.tokens.len() * (8 + 4 * self.dim));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u32).to_le_bytes());
        for (i, token) in self.tokens.iter().enumerate() {
            out.extend_from_slice(&(token.len() as u32).to_le_bytes());
            out.extend_from_slice(token.as_bytes());
            for &w in self.row(i) {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim < 2 {
            return Err(CheckpointError::Format(format!("dimension {dim} < 2")));
        }
        let count = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(count.min(1 << 20));
        let mut weights = Vec::with_capacity(count.min(1 << 20) * dim);
        for _ in 0..count {
            tokens.push(r.string()?);
            for _ in 0..dim {
                weights.push(r.f32()? as f64);
            }
        }
        r.finish()?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(CheckpointError::Format(format!("duplicate token {dup:?}")));
        }
        Ok(Self::assemble(tokens, dim, weights))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl TextEncoder for EncoderModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        EncoderModel::encode(self, text)
    }

    /// SHA-256 of the checkpoint bytes.
    fn fingerprint(&self) -> Fingerprint {
        Sha256::digest(self.to_bytes()).into()
    }
}

pub fn fingerprint_hex(fp: &Fingerprint) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    pub fn finish(self) -> Result<(), CheckpointError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> EncoderModel {
        EncoderModel::from_rows(
            vec!["create".into(), "email".into(), "send".into()],
            vec![vec![1.0, 2.0, 2.0], vec![0.0, 3.0, 4.0], vec![3.0, 0.0, 4.0]],
        )
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn single_token_is_its_normalized_row() {
        let v = fixture().encode("Email").unwrap();
        assert_close(v.values(), &[0.0, 0.6, 0.8], 1e-15);
    }

    #[test]
    fn repeated_token_equals_single_occurrence() {
        let m = fixture();
        assert_eq!(m.encode("send send").unwrap(), m.encode("send").unwrap());
    }

    #[test]
    fn two_tokens_hand_arithmetic() {
        // (1,2,2) + (3,0,4) = (4,2,6); /2 = (2,1,3); norm √14
        let s = 14f64.sqrt();
        let v = fixture().encode("create send").unwrap();
        assert_close(v.values(), &[2.0 / s, 1.0 / s, 3.0 / s], 1e-15);
    }

    #[test]
    fn oov_tokens_are_skipped_and_all_oov_errors() {
        let m = fixture();
        assert_eq!(m.encode("please send now").unwrap(), m.encode("send").unwrap());
        assert!(matches!(m.encode("nothing here"), Err(EncodeError::NoKnownTokens(_))));
        assert!(matches!(m.encode(""), Err(EncodeError::NoKnownTokens(_))));
    }

    #[test]
    fn cancelling_rows_give_near_zero_error() {
        let m = EncoderModel::from_rows(vec!["a".into(), "b".into()], vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert!(matches!(m.encode("a b"), Err(EncodeError::NearZeroVector { .. })));
    }

    #[test]
    fn cosine_examples() {
        let v = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        let w = EmbeddingVector::normalized(vec![0.6, 0.8]).unwrap();
        let o = EmbeddingVector::normalized(vec![0.0, 2.0]).unwrap();
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&v, &o), 0.0);
        assert!((cosine_similarity(&v, &w) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let g = fixture().encode_gradient("create send", &[0.0; 3]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn orthogonal_upstream_single_token() {
        // row (0,3,4): ‖x‖ = 5, v = (0,.6,.8); u = (1,0,0) ⟂ v → grad = u/5
        let g = fixture().encode_gradient("email", &[1.0, 0.0, 0.0]).unwrap();
        assert_close(g.row(1), &[0.2, 0.0, 0.0], 1e-15);
        assert_close(g.row(0), &[0.0; 3], 0.0);
    }

    #[test]
    fn gradient_dimension_checked() {
        assert!(matches!(
            fixture().encode_gradient("email", &[1.0]),
            Err(EncodeError::DimensionMismatch { .. })
        ));
    }

    fn fd_gradient(model: &EncoderModel, text: &str, upstream: &[f64], h: f64) -> Vec<f64> {
        let mut m = model.clone();
        (0..m.weights().len())
            .map(|i| {
                let w = m.weights()[i];
                m.weights_mut()[i] = w + h;
                let plus = dot(m.encode(text).unwrap().values(), upstream);
                m.weights_mut()[i] = w - h;
                let minus = dot(m.encode(text).unwrap().values(), upstream);
                m.weights_mut()[i] = w;
                (plus - minus) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences_on_fixture() {
        let m = fixture();
        let upstream = [0.3, -1.2, 0.7];
        let analytic = m.encode_gradient("create send email send", &upstream).unwrap();
        let numeric = fd_gradient(&m, "create send email send", &upstream, 1e-5);
        for (a, n) in analytic.values.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
        }
    }

    #[test]
    fn checkpoint_layout() {
        let m = EncoderModel::from_rows(vec!["ab".into(), "c".into()], vec![vec![1.0, -2.0], vec![0.5, 0.25]]);
        let bytes = m.to_bytes();
        let mut expected = b"FLRG".to_vec();
        expected.extend([1, 0]);
        expected.extend([2, 0, 0, 0]);
        expected.extend([2, 0, 0, 0]);
        expected.extend([2, 0, 0, 0]);
        expected.extend(b"ab");
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        expected.extend([1, 0, 0, 0]);
        expected.extend(b"c");
        expected.extend(0.5f32.to_le_bytes());
        expected.extend(0.25f32.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(EncoderModel::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(EncoderModel::from_bytes(b"NOPE").is_err());
        let mut bytes = fixture().to_bytes();
        bytes.pop();
        assert!(EncoderModel::from_bytes(&bytes).is_err());
        let mut bytes = fixture().to_bytes();
        bytes.push(0);
        assert!(EncoderModel::from_bytes(&bytes).is_err());
    }

    #[test]
    fn random_init_is_seeded() {
        let vocab = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert_eq!(EncoderModel::random(vocab.clone(), 8, 7), EncoderModel::random(vocab.clone(), 8, 7));
        assert_ne!(EncoderModel::random(vocab.clone(), 8, 7), EncoderModel::random(vocab, 8, 8));
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let m = fixture();
        let mut other = m.clone();
        other.row_mut(0)[0] += 1.0;
        assert_eq!(m.fingerprint(), fixture().fingerprint());
        assert_ne!(m.fingerprint(), other.fingerprint());
        assert_eq!(fingerprint_hex(&m.fingerprint()).len(), 64);
    }

    fn model_and_text() -> impl Strategy<Value = (EncoderModel, Vec<usize>)> {
        (2usize..6, 1usize..6).prop_flat_map(|(dim, vocab)| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), vocab),
                prop::collection::vec(0..vocab, 1..8),
            )
                .prop_map(|(rows, text)| {
                    let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
                    (EncoderModel::from_rows(tokens, rows), text)
                })
        })
    }

    fn render(ids: &[usize]) -> String {
        ids.iter().map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn output_is_unit_norm((model, ids) in model_and_text()) {
            if let Ok(v) = model.encode(&render(&ids)) {
                prop_assert!((v.norm() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn token_order_does_not_matter((model, ids) in model_and_text(), rot in 0usize..8) {
            let mut permuted = ids.clone();
            permuted.sort();
            let r = rot % permuted.len();
            permuted.rotate_left(r);
            let a = model.encode(&render(&ids));
            let b = model.encode(&render(&permuted));
            match (a, b) {
                (Ok(a), Ok(b)) => for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() < 1e-12);
                },
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }

        #[test]
        fn positive_row_scaling_is_absorbed((model, ids) in model_and_text(), scale in 0.01f64..100.0) {
            let mut scaled = model.clone();
            scaled.weights_mut().iter_mut().for_each(|w| *w *= scale);
            if let (Ok(a), Ok(b)) = (model.encode(&render(&ids)), scaled.encode(&render(&ids))) {
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn checkpoint_round_trip_is_byte_identical((model, _ids) in model_and_text()) {
            let bytes = model.to_bytes();
            let loaded = EncoderModel::from_bytes(&bytes).unwrap();
            prop_assert_eq!(loaded.to_bytes(), bytes);
        }
    }
}
