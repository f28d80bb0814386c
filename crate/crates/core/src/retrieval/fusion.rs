use std::collections::HashMap;

use super::{sort_scored, ScoredChunk, Stage};

pub const RRF_CONSTANT: f64 = 60.0;

/// Reciprocal rank fusion over any number of ranked lists (ranks start at 1).
pub fn fuse_lists(lists: &[&[ScoredChunk]], k: usize) -> Vec<ScoredChunk> {
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for list in lists {
        for (rank, item) in list.iter().enumerate() {
            *scores.entry(item.chunk_id.as_str()).or_default() += 1.0 / (RRF_CONSTANT + (rank + 1) as f64);
        }
    }
    let mut out: Vec<ScoredChunk> = scores.into_iter().map(|(id, s)| ScoredChunk::new(id, s, Stage::Fused)).collect();
    sort_scored(&mut out);
    out.truncate(k);
    out
}

pub fn fuse(sparse: &[ScoredChunk], dense: &[ScoredChunk], k: usize) -> Vec<ScoredChunk> {
    fuse_lists(&[sparse, dense], k)
}
