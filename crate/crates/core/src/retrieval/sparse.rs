//! BM25 over an in-memory inverted index.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{sort_scored, ScoredChunk, Stage};
use crate::kb_ingest::KnowledgeBase;
use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseIndex {
    /// term → (chunk_id, term frequency), chunk ids ascending.
    pub postings: BTreeMap<String, Vec<(String, u32)>>,
    pub doc_lengths: HashMap<String, usize>,
    pub avg_doc_len: f64,
    pub doc_count: usize,
}

impl SparseIndex {
    pub fn build(kb: &KnowledgeBase) -> Self {
        Self::from_texts(kb.chunks().iter().map(|c| (c.chunk_id.as_str(), c.text.as_str())))
    }

    pub fn from_texts<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut postings: BTreeMap<String, Vec<(String, u32)>> = BTreeMap::new();
        let mut doc_lengths = HashMap::new();
        for (id, text) in docs {
            let tokens = tokenize(text);
            doc_lengths.insert(id.to_string(), tokens.len());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((id.to_string(), count));
            }
        }
        for list in postings.values_mut() {
            list.sort();
        }
        let doc_count = doc_lengths.len();
        let avg_doc_len = if doc_count == 0 { 0.0 } else { doc_lengths.values().sum::<usize>() as f64 / doc_count as f64 };
        Self { postings, doc_lengths, avg_doc_len, doc_count }
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-k chunks by BM25; each distinct query term counts once.
    pub fn search(&self, query: &str, k: usize) -> Vec<ScoredChunk> {
        if k == 0 || self.doc_count == 0 {
            return Vec::new();
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scores: HashMap<&str, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for (id, tf) in list {
                let tf = *tf as f64;
                let dl = self.doc_lengths[id] as f64;
                let norm = if self.avg_doc_len > 0.0 { dl / self.avg_doc_len } else { 0.0 };
                let part = idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm));
                *scores.entry(id.as_str()).or_default() += part;
            }
        }
        let mut out: Vec<ScoredChunk> = scores.into_iter().map(|(id, score)| ScoredChunk::new(id, score, Stage::Sparse)).collect();
        sort_scored(&mut out);
        out.truncate(k);
        out
    }
}
