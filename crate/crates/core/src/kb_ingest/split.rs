//! Boundary scoring and greedy packing of blocks into chunks.

use super::{Block, BlockKind, Chunk, SourceDocument, SplitConfig};

/// Verdict for the gap between two consecutive blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Always start a new chunk here.
    Always,
    /// A split is permitted; the weight is informational for rule scorers.
    Allowed(f64),
    /// Never split here.
    Never,
}

pub trait SplitBoundaryScorer {
    fn score(&self, prev: &Block, next: &Block) -> Boundary;
}

/// Headings always open a new chunk; every other block gap is a paragraph break.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleBoundaryScorer;

impl SplitBoundaryScorer for RuleBoundaryScorer {
    fn score(&self, _prev: &Block, next: &Block) -> Boundary {
        match next.kind {
            BlockKind::Heading { .. } => Boundary::Always,
            _ => Boundary::Allowed(1.0),
        }
    }
}

pub(crate) const BLOCK_SEPARATOR: &str = "\n\n";

pub fn split_into_chunks(doc: &SourceDocument, cfg: &SplitConfig) -> Vec<Chunk> {
    split_with_scorer(doc, cfg, &RuleBoundaryScorer)
}

pub fn split_with_scorer(doc: &SourceDocument, cfg: &SplitConfig, scorer: &dyn SplitBoundaryScorer) -> Vec<Chunk> {
    let sep_len = BLOCK_SEPARATOR.chars().count();
    let mut groups: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut heading_stack: Vec<(u8, String)> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut current_len = 0usize;
    let mut current_path: Vec<String> = Vec::new();
    let mut prev: Option<&Block> = None;

    for block in &doc.blocks {
        if let BlockKind::Heading { level } = block.kind {
            while heading_stack.last().is_some_and(|(l, _)| *l >= level) {
                heading_stack.pop();
            }
        }
        let rendered = block.render();
        let len = rendered.chars().count();
        let split_here = match prev {
            None => false,
            Some(p) => match scorer.score(p, block) {
                Boundary::Always => true,
                Boundary::Never => false,
                Boundary::Allowed(w) if w <= 0.0 => false,
                Boundary::Allowed(_) => current_len >= cfg.min_chars && current_len + sep_len + len > cfg.max_chars,
            },
        };
        if split_here && !current.is_empty() {
            groups.push((std::mem::take(&mut current), std::mem::take(&mut current_path)));
            current_len = 0;
        }
        if let BlockKind::Heading { level } = block.kind {
            heading_stack.push((level, block.text.clone()));
        }
        if current.is_empty() {
            current_path = heading_stack.iter().map(|(_, t)| t.clone()).collect();
            current_len = len;
        } else {
            current_len += sep_len + len;
        }
        current.push(rendered);
        prev = Some(block);
    }
    if !current.is_empty() {
        groups.push((current, current_path));
    }

    let mut chunks: Vec<Chunk> = groups
        .into_iter()
        .enumerate()
        .map(|(ordinal, (parts, heading_path))| {
            Chunk::new(
                Chunk::make_id(&doc.doc_id, ordinal),
                parts.join(BLOCK_SEPARATOR),
                doc.version_tag.clone(),
                heading_path,
                doc.source.clone(),
            )
        })
        .collect();
    super::link_in_order(&mut chunks);
    chunks
}
