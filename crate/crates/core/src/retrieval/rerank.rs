use std::collections::BTreeSet;

use super::{sort_scored, RetrievalError, ScoredChunk, Stage};
use crate::kb_ingest::KnowledgeBase;
use crate::text::tokenize;

pub trait Reranker: Send + Sync {
    /// Relevance of `passage` to `query`; negative means irrelevant.
    fn score(&self, query: &str, passage: &str) -> f64;
}

/// Dice overlap of token sets minus a fixed offset, so disjoint texts score negative.
#[derive(Debug, Clone)]
pub struct LexicalOverlapReranker {
    pub offset: f64,
}

impl Default for LexicalOverlapReranker {
    fn default() -> Self {
        Self { offset: 0.1 }
    }
}

impl Reranker for LexicalOverlapReranker {
    fn score(&self, query: &str, passage: &str) -> f64 {
        let q: BTreeSet<String> = tokenize(query).into_iter().collect();
        let p: BTreeSet<String> = tokenize(passage).into_iter().collect();
        let denom = (q.len() + p.len()) as f64;
        if denom == 0.0 {
            return -self.offset;
        }
        2.0 * q.intersection(&p).count() as f64 / denom - self.offset
    }
}

/// Rescore candidates, sort descending and drop everything scoring below zero.
pub fn rerank(
    reranker: &dyn Reranker,
    query: &str,
    candidates: &[ScoredChunk],
    kb: &KnowledgeBase,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let chunk = kb.get(&c.chunk_id).ok_or_else(|| RetrievalError::UnknownChunkId(c.chunk_id.clone()))?;
        let score = reranker.score(query, &chunk.text);
        if score >= 0.0 {
            out.push(ScoredChunk::new(&c.chunk_id, score, Stage::Reranked));
        }
    }
    sort_scored(&mut out);
    Ok(out)
}
