//! Exact flat vector index over catalog steps or tables.
//!
//! Index file layout (integers little-endian):
//!
//! ```text
//! "FLIX" | version: u16 | kind: u8 (0 step, 1 table) | dim: u32 | count: u32 |
//! encoder fingerprint: 32 bytes |
//! repeated { name length: u32 | name UTF-8 bytes | dim × f32 }
//! ```

use std::path::Path;

use thiserror::Error;

use crate::catalog::Catalog;
use crate::encoder::{fingerprint_hex, ByteReader, CheckpointError, EmbeddingVector, EncodeError, Fingerprint, TextEncoder};
use crate::trainer::{item_text, ItemKind};

pub const INDEX_MAGIC: &[u8; 4] = b"FLIX";
pub const INDEX_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot encode {kind:?} {item:?}: {source}")]
    Encode {
        kind: ItemKind,
        item: String,
        #[source]
        source: EncodeError,
    },
    #[error("index was built with encoder {found}, serving encoder is {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("index holds {found:?} items, expected {expected:?}")]
    KindMismatch { expected: ItemKind, found: ItemKind },
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Format(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    kind: ItemKind,
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    fingerprint: Fingerprint,
}

/// Builds one row per catalog item of `kind`, in catalog order.
pub fn build_index(encoder: &impl TextEncoder, catalog: &Catalog, kind: ItemKind) -> Result<VectorIndex, IndexError> {
    let names: Vec<&str> = match kind {
        ItemKind::Step => catalog.steps().iter().map(|s| s.name.as_str()).collect(),
        ItemKind::Table => catalog.tables().iter().map(|t| t.name.as_str()).collect(),
    };
    let dim = encoder.dim();
    let mut matrix = Vec::with_capacity(names.len() * dim);
    for name in &names {
        let v = encoder
            .encode(&item_text(catalog, kind, name))
            .map_err(|source| IndexError::Encode {
                kind,
                item: name.to_string(),
                source,
            })?;
        matrix.extend(v.values().iter().map(|&x| x as f32));
    }
    Ok(VectorIndex {
        kind,
        dim,
        ids: names.into_iter().map(str::to_string).collect(),
        matrix,
        fingerprint: encoder.fingerprint(),
    })
}

impl VectorIndex {
    pub fn kind(&self) -> ItemKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn check_fingerprint(&self, expected: &Fingerprint) -> Result<(), IndexError> {
        if &self.fingerprint == expected {
            Ok(())
        } else {
            Err(IndexError::FingerprintMismatch {
                expected: fingerprint_hex(expected),
                found: fingerprint_hex(&self.fingerprint),
            })
        }
    }

    fn scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        Ok((0..self.len())
            .map(|i| self.row(i).iter().zip(query.values()).map(|(&r, q)| f64::from(r) * q).sum())
            .collect())
    }

    /// Every item ranked by cosine similarity, ties by name ascending.
    pub fn ranking(&self, query: &EmbeddingVector) -> Result<Vec<(String, f64)>, IndexError> {
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b])));
        Ok(order.into_iter().map(|i| (self.ids[i].clone(), scores[i])).collect())
    }

    /// Exact top-`k`; returns `min(k, len)` entries.
    pub fn topk(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>, IndexError> {
        let mut ranked = self.ranking(query)?;
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(47 + self.matrix.len() * 4 + self.ids.iter().map(|s| s.len() + 4).sum::<usize>());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.push(match self.kind {
            ItemKind::Step => 0,
            ItemKind::Table => 1,
        });
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &x in self.row(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let format = |m: String| IndexError::Format(CheckpointError::Format(m));
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != INDEX_MAGIC {
            return Err(format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => ItemKind::Step,
            1 => ItemKind::Table,
            other => return Err(format(format!("unknown kind {other}"))),
        };
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let fingerprint: Fingerprint = r.take(32)?.try_into().expect("took 32 bytes");
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut matrix = Vec::with_capacity(count.min(1 << 20) * dim);
        for _ in 0..count {
            ids.push(r.string()?);
            for _ in 0..dim {
                matrix.push(r.f32()?);
            }
        }
        r.finish()?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(format(format!("duplicate item {dup:?}")));
        }
        Ok(Self {
            kind,
            dim,
            ids,
            matrix,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        std::fs::write(path, self.to_bytes()).map_err(CheckpointError::from)?;
        Ok(())
    }

    /// Loads an index, rejecting it when it was built by a different encoder
    /// or holds the wrong item kind.
    pub fn load(path: &Path, kind: ItemKind, encoder_fingerprint: Option<&Fingerprint>) -> Result<Self, IndexError> {
        let index = Self::from_bytes(&std::fs::read(path).map_err(CheckpointError::from)?)?;
        if index.kind != kind {
            return Err(IndexError::KindMismatch {
                expected: kind,
                found: index.kind,
            });
        }
        if let Some(fp) = encoder_fingerprint {
            index.check_fingerprint(fp)?;
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{StepCategory, StepDefinition, TableName};
    use crate::encoder::{build_vocab, EncoderModel};

    fn catalog() -> Catalog {
        Catalog::new(
            vec![
                StepDefinition::new("send_email", StepCategory::Action, "send an email"),
                StepDefinition::new("create_ticket", StepCategory::Action, "open a ticket"),
                StepDefinition::new("close_ticket", StepCategory::Action, "resolve a ticket"),
            ],
            vec![TableName::new("incidents"), TableName::new("tasks")],
            vec![],
        )
    }

    fn model(c: &Catalog) -> EncoderModel {
        let texts: Vec<String> = c.steps().iter().map(|s| s.prompt_line()).chain(c.tables().iter().map(|t| t.name.clone())).collect();
        EncoderModel::random(build_vocab(texts.iter().map(String::as_str)), 8, 11)
    }

    #[test]
    fn empty_catalog_gives_empty_index() {
        let c = catalog();
        let idx = build_index(&model(&c), &Catalog::default(), ItemKind::Step).unwrap();
        assert!(idx.is_empty());
        let q = model(&c).encode("ticket").unwrap();
        assert!(idx.topk(&q, 5).unwrap().is_empty());
    }

    #[test]
    fn rows_equal_encoded_items() {
        let c = catalog();
        let m = model(&c);
        let idx = build_index(&m, &c, ItemKind::Step).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.ids(), &["close_ticket", "create_ticket", "send_email"]);
        for (i, id) in idx.ids().iter().enumerate() {
            let v = m.encode(&c.step(id).unwrap().prompt_line()).unwrap();
            let expect: Vec<f32> = v.values().iter().map(|&x| x as f32).collect();
            assert_eq!(idx.row(i), expect.as_slice());
            let norm: f64 = idx.row(i).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_query_ranks_first_with_unit_score() {
        let c = catalog();
        let m = model(&c);
        let idx = build_index(&m, &c, ItemKind::Table).unwrap();
        let hits = idx.topk(&m.encode("tasks").unwrap(), 1).unwrap();
        assert_eq!(hits[0].0, "tasks");
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equal_scores_break_by_name() {
        let m = EncoderModel::from_rows(vec!["a".into(), "b".into()], vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let c = Catalog::new(vec![], vec![TableName::new("b"), TableName::new("a")], vec![]);
        let idx = build_index(&m, &c, ItemKind::Table).unwrap();
        let hits = idx.topk(&m.encode("a").unwrap(), 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn unencodable_item_is_named() {
        let c = catalog();
        let m = EncoderModel::from_rows(vec!["ticket".into(), "x".into()], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        match build_index(&m, &c, ItemKind::Table) {
            Err(IndexError::Encode { item, .. }) => assert_eq!(item, "incidents"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rebuild_is_byte_identical_and_round_trips() {
        let c = catalog();
        let m = model(&c);
        let a = build_index(&m, &c, ItemKind::Step).unwrap().to_bytes();
        let b = build_index(&m, &c, ItemKind::Step).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_eq!(&a[..4], b"FLIX");
        assert_eq!(a[6], 0);
        assert_eq!(VectorIndex::from_bytes(&a).unwrap().to_bytes(), a);
    }

    #[test]
    fn load_checks_fingerprint_and_kind() {
        let c = catalog();
        let m = model(&c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.flix");
        build_index(&m, &c, ItemKind::Step).unwrap().save(&path).unwrap();
        assert!(VectorIndex::load(&path, ItemKind::Step, Some(&m.fingerprint())).is_ok());
        let other = EncoderModel::random(m.tokens().to_vec(), 8, 12);
        assert!(matches!(
            VectorIndex::load(&path, ItemKind::Step, Some(&other.fingerprint())),
            Err(IndexError::FingerprintMismatch { .. })
        ));
        assert!(matches!(VectorIndex::load(&path, ItemKind::Table, None), Err(IndexError::KindMismatch { .. })));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let c = catalog();
        let idx = build_index(&model(&c), &c, ItemKind::Step).unwrap();
        let q = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        assert!(matches!(idx.topk(&q, 1), Err(IndexError::DimensionMismatch { .. })));
    }
}
