//! Hybrid literal + semantic retrieval.
//!
//! Each query variant is searched by BM25 ([`sparse`]) and by exact cosine
//! over embeddings ([`dense`]); all lists are merged by reciprocal rank
//! fusion, rescored by a [`Reranker`] that drops anything below zero, and
//! finally widened with neighboring chunks from the same document.

pub mod dense;
pub mod fusion;
pub mod rerank;
pub mod sparse;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb_ingest::KnowledgeBase;

pub use dense::{DenseIndex, Embedder, EmbeddingVector, FeatureHashEmbedder};
pub use fusion::{fuse, fuse_lists, RRF_CONSTANT};
pub use rerank::{rerank, LexicalOverlapReranker, Reranker};
pub use sparse::SparseIndex;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("embedding dimension mismatch: index has {expected}, query has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unknown chunk id `{0}`")]
    UnknownChunkId(String),
    #[error("dense index: {0}")]
    Persistence(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sparse,
    Dense,
    Fused,
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub score: f64,
    pub stage: Stage,
}

impl ScoredChunk {
    pub fn new(chunk_id: &str, score: f64, stage: Stage) -> Self {
        Self { chunk_id: chunk_id.to_string(), score, stage }
    }
}

/// Score descending, then chunk id ascending.
pub fn sort_scored(items: &mut [ScoredChunk]) {
    items.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.chunk_id.cmp(&b.chunk_id),
        o => o,
    });
}

/// Append prev/next chunks within `radius` links of each result, scored just below their parent.
pub fn expand_neighbors(results: &[ScoredChunk], kb: &KnowledgeBase, radius: usize) -> Vec<ScoredChunk> {
    if radius == 0 {
        return results.to_vec();
    }
    let mut best: HashMap<String, ScoredChunk> = HashMap::new();
    let mut keep = |item: ScoredChunk| {
        best.entry(item.chunk_id.clone())
            .and_modify(|cur| {
                if item.score > cur.score {
                    *cur = item.clone();
                }
            })
            .or_insert(item);
    };
    for r in results {
        keep(r.clone());
        for forward in [false, true] {
            let mut cursor = kb.get(&r.chunk_id);
            for distance in 1..=radius {
                let next = cursor.and_then(|c| if forward { c.next_id.as_deref() } else { c.prev_id.as_deref() });
                let Some(id) = next else { break };
                // Clamped so expansion never re-introduces a below-zero score.
                let score = (r.score - 1e-9 * distance as f64).max(0.0).min(r.score);
                keep(ScoredChunk::new(id, score, r.stage));
                cursor = kb.get(id);
            }
        }
    }
    let mut out: Vec<ScoredChunk> = best.into_values().collect();
    sort_scored(&mut out);
    out
}

#[derive(Debug, Clone)]
pub struct RetrievalConfig {
    /// Depth of each sparse/dense arm and of the fused candidate list.
    pub candidate_depth: usize,
    pub neighbor_radius: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { candidate_depth: 20, neighbor_radius: 1 }
    }
}

/// Every intermediate list of one retrieval, for replay and attribution.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RetrievalTrace {
    pub sparse: Vec<Vec<ScoredChunk>>,
    pub dense: Vec<Vec<ScoredChunk>>,
    pub fused: Vec<ScoredChunk>,
    pub reranked: Vec<ScoredChunk>,
    pub results: Vec<ScoredChunk>,
}

/// Immutable search engine over one knowledge base.
pub struct HybridRetriever {
    kb: Arc<KnowledgeBase>,
    sparse: SparseIndex,
    dense: DenseIndex,
    embedder: Arc<dyn Embedder>,
    reranker: Arc<dyn Reranker>,
    config: RetrievalConfig,
}

impl std::fmt::Debug for HybridRetriever {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridRetriever").field("chunks", &self.kb.len()).field("config", &self.config).finish()
    }
}

impl HybridRetriever {
    pub fn new(kb: Arc<KnowledgeBase>) -> Self {
        Self::with_models(kb, Arc::new(FeatureHashEmbedder::default()), Arc::new(LexicalOverlapReranker::default()))
    }

    pub fn with_models(kb: Arc<KnowledgeBase>, embedder: Arc<dyn Embedder>, reranker: Arc<dyn Reranker>) -> Self {
        let sparse = SparseIndex::build(&kb);
        let dense = DenseIndex::build(&kb, embedder.as_ref());
        Self { kb, sparse, dense, embedder, reranker, config: RetrievalConfig::default() }
    }

    pub fn with_config(mut self, config: RetrievalConfig) -> Self {
        self.config = config;
        self
    }

    /// Replace the dense index with a persisted one (must cover the same chunks).
    pub fn with_dense_index(mut self, dense: DenseIndex) -> Result<Self, RetrievalError> {
        if dense.dimension() != self.embedder.dimension() {
            return Err(RetrievalError::DimensionMismatch { expected: self.embedder.dimension(), actual: dense.dimension() });
        }
        self.dense = dense;
        Ok(self)
    }

    pub fn kb(&self) -> &Arc<KnowledgeBase> {
        &self.kb
    }

    pub fn sparse_index(&self) -> &SparseIndex {
        &self.sparse
    }

    pub fn dense_index(&self) -> &DenseIndex {
        &self.dense
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        self.embedder.embed(text)
    }

    pub fn search_sparse(&self, query: &str, k: usize) -> Vec<ScoredChunk> {
        self.sparse.search(query, k)
    }

    pub fn search_dense(&self, query_vec: &EmbeddingVector, k: usize) -> Result<Vec<ScoredChunk>, RetrievalError> {
        self.dense.search(query_vec, k)
    }

    pub fn rerank(&self, query: &str, candidates: &[ScoredChunk]) -> Result<Vec<ScoredChunk>, RetrievalError> {
        rerank(self.reranker.as_ref(), query, candidates, &self.kb)
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredChunk>, RetrievalError> {
        Ok(self.retrieve_traced(&[query.to_string()], k)?.results)
    }

    /// Search every variant on both arms, fuse all lists, rerank against the
    /// first variant, expand neighbors and cut to `k`.
    pub fn retrieve_traced(&self, variants: &[String], k: usize) -> Result<RetrievalTrace, RetrievalError> {
        let mut trace = RetrievalTrace::default();
        let Some(primary) = variants.first() else {
            return Ok(trace);
        };
        let depth = self.config.candidate_depth.max(k);
        for v in variants {
            trace.sparse.push(self.search_sparse(v, depth));
            trace.dense.push(self.search_dense(&self.embed(v), depth)?);
        }
        let lists: Vec<&[ScoredChunk]> = trace.sparse.iter().zip(&trace.dense).flat_map(|(s, d)| [s.as_slice(), d.as_slice()]).collect();
        trace.fused = fuse_lists(&lists, depth);
        trace.reranked = self.rerank(primary, &trace.fused)?;
        let mut results = expand_neighbors(&trace.reranked, &self.kb, self.config.neighbor_radius);
        results.truncate(k);
        trace.results = results;
        Ok(trace)
    }
}
