//! Dense retrieval: pluggable embedder and an exact cosine index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sort_scored, RetrievalError, ScoredChunk, Stage};
use crate::kb_ingest::KnowledgeBase;
use crate::text::{fnv1a64, tokenize};

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Scale to unit length; zero vectors stay zero.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|v| *v /= n);
        }
        self
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

/// Signed feature hashing: token hash picks the bucket, its top bit picks the sign.
#[derive(Debug, Clone)]
pub struct FeatureHashEmbedder {
    dim: usize,
}

impl FeatureHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for FeatureHashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for FeatureHashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        let mut v = EmbeddingVector::zeros(self.dim);
        for tok in tokenize(text) {
            let h = fnv1a64(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v.0[bucket] += sign;
        }
        v.normalized()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenseRow {
    chunk_id: String,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    rows: Vec<(String, EmbeddingVector)>,
}

impl DenseIndex {
    pub fn build(kb: &KnowledgeBase, embedder: &dyn Embedder) -> Self {
        Self { dim: embedder.dimension(), rows: kb.chunks().iter().map(|c| (c.chunk_id.clone(), embedder.embed(&c.text))).collect() }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vector(&self, chunk_id: &str) -> Option<&EmbeddingVector> {
        self.rows.iter().find(|(id, _)| id == chunk_id).map(|(_, v)| v)
    }

    /// Exhaustive cosine top-k; chunks with zero vectors are never returned.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredChunk>, RetrievalError> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, actual: query.dim() });
        }
        if query.is_zero() || k == 0 {
            return Ok(Vec::new());
        }
        let mut out: Vec<ScoredChunk> =
            self.rows.iter().filter(|(_, v)| !v.is_zero()).map(|(id, v)| ScoredChunk::new(id, query.dot(v), Stage::Dense)).collect();
        sort_scored(&mut out);
        out.truncate(k);
        Ok(out)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.rows {
            let row = DenseRow { chunk_id: id.clone(), values: v.0.clone() };
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RetrievalError> {
        let mut rows = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: DenseRow = serde_json::from_str(line).map_err(|e| RetrievalError::Persistence(format!("line {}: {e}", i + 1)))?;
            match dim {
                None => dim = Some(row.values.len()),
                Some(d) if d != row.values.len() => {
                    return Err(RetrievalError::DimensionMismatch { expected: d, actual: row.values.len() })
                }
                _ => {}
            }
            rows.push((row.chunk_id, EmbeddingVector(row.values)));
        }
        Ok(Self { dim: dim.unwrap_or(DEFAULT_DIMENSION), rows })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}
