//! Knowledge-base ingestion: parse, split, de-duplicate and link chunks.
//!
//! The pipeline is `parse_document` → `split_into_chunks` → `deduplicate`
//! (global, across documents) → neighbor relinking. A built
//! [`KnowledgeBase`] is immutable and serializes to a JSON-Lines manifest.

mod parse;
mod split;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

pub use parse::parse_document;
pub use split::{split_into_chunks, split_with_scorer, Boundary, RuleBoundaryScorer, SplitBoundaryScorer};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unsupported document format `{0}`")]
    UnsupportedFormat(String),
    #[error("document `{doc_id}` is not valid UTF-8 (first bad byte at {offset})")]
    InvalidEncoding { doc_id: String, offset: usize },
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("invalid split config: {0}")]
    InvalidConfig(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("document `{doc_id}`: {source}")]
    Document {
        doc_id: String,
        #[source]
        source: Box<IngestError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocFormat {
    Markdown,
    Plaintext,
}

impl DocFormat {
    pub fn parse(name: &str) -> Result<Self, IngestError> {
        match name.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "plaintext" | "text" | "txt" => Ok(Self::Plaintext),
            other => Err(IngestError::UnsupportedFormat(other.to_string())),
        }
    }

    /// Format implied by a file extension, if supported.
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Some(Self::Markdown),
            "txt" | "text" => Some(Self::Plaintext),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    Heading {
        level: u8,
    },
    Paragraph,
    /// `fence` is the literal opening marker; `closed` is false when the fence ran to end of input.
    CodeFence {
        info: String,
        fence: String,
        closed: bool,
    },
    Table,
    ListItem,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub kind: BlockKind,
    pub text: String,
}

impl Block {
    pub fn new(kind: BlockKind, text: impl Into<String>) -> Self {
        Self { kind, text: text.into() }
    }

    /// Source form of the block as it appears inside a chunk.
    pub fn render(&self) -> String {
        match &self.kind {
            BlockKind::Heading { level } => {
                format!("{} {}", "#".repeat(*level as usize), self.text)
            }
            BlockKind::CodeFence { info, fence, closed } => {
                let mut out = format!("{fence}{info}\n");
                if !self.text.is_empty() {
                    out.push_str(&self.text);
                    out.push('\n');
                }
                if *closed {
                    out.push_str(fence);
                } else {
                    out.pop();
                }
                out
            }
            _ => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDocument {
    pub doc_id: String,
    pub format: DocFormat,
    pub source: String,
    pub version_tag: String,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { min_chars: 200, max_chars: 800 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.min_chars == 0 || self.max_chars < self.min_chars {
            return Err(IngestError::InvalidConfig(format!(
                "need max_chars >= min_chars > 0, got min={} max={}",
                self.min_chars, self.max_chars
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let cfg: SplitConfig = serde_json::from_str(text).map_err(|e| IngestError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Content hash serialized as a decimal string in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub u64);

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map(ContentHash).map_err(serde::de::Error::custom)
    }
}

/// Field order here is the manifest's column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub text: String,
    pub content_hash: ContentHash,
    pub version_tag: String,
    pub prev_id: Option<String>,
    pub next_id: Option<String>,
    pub heading_path: Vec<String>,
    pub source: String,
}

impl Chunk {
    pub fn new(chunk_id: String, text: String, version_tag: String, heading_path: Vec<String>, source: String) -> Self {
        let content_hash = ContentHash(text::content_hash(&text));
        Self { chunk_id, text, content_hash, version_tag, prev_id: None, next_id: None, heading_path, source }
    }

    pub fn make_id(doc_id: &str, ordinal: usize) -> String {
        format!("{doc_id}#{ordinal:04}")
    }

    /// Document the chunk was split from (the id prefix before the last `#`).
    pub fn doc_id(&self) -> &str {
        self.chunk_id.rsplit_once('#').map_or(self.chunk_id.as_str(), |(d, _)| d)
    }

    pub fn normalized_text(&self) -> String {
        text::normalize(&self.text)
    }
}

/// Rewrite prev/next so each document's chunks form a chain in slice order.
pub(crate) fn link_in_order(chunks: &mut [Chunk]) {
    let mut last_of_doc: HashMap<String, usize> = HashMap::new();
    for c in chunks.iter_mut() {
        c.prev_id = None;
        c.next_id = None;
    }
    for i in 0..chunks.len() {
        let doc = chunks[i].doc_id().to_string();
        if let Some(&p) = last_of_doc.get(&doc) {
            let prev_id = chunks[p].chunk_id.clone();
            let this_id = chunks[i].chunk_id.clone();
            chunks[p].next_id = Some(this_id);
            chunks[i].prev_id = Some(prev_id);
        }
        last_of_doc.insert(doc, i);
    }
}

/// Drop later chunks whose normalized text equals an earlier one, then relink survivors.
pub fn deduplicate(chunks: Vec<Chunk>) -> Vec<Chunk> {
    let mut seen: HashMap<ContentHash, Vec<String>> = HashMap::new();
    let mut survivors = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let normalized = chunk.normalized_text();
        let bucket = seen.entry(chunk.content_hash).or_default();
        // The hash only indexes; text equality decides.
        if bucket.contains(&normalized) {
            continue;
        }
        bucket.push(normalized);
        survivors.push(chunk);
    }
    link_in_order(&mut survivors);
    survivors
}

/// Raw input for one document before parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub format: String,
    pub source: String,
    pub version_tag: String,
    pub content: String,
}

impl RawDocument {
    pub fn parse(&self) -> Result<SourceDocument, IngestError> {
        let format =
            DocFormat::parse(&self.format).map_err(|e| IngestError::Document { doc_id: self.doc_id.clone(), source: Box::new(e) })?;
        parse_document(self.content.as_bytes(), format, &self.doc_id, &self.source, &self.version_tag)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn from_chunks(chunks: Vec<Chunk>) -> Self {
        let by_id = chunks.iter().enumerate().map(|(i, c)| (c.chunk_id.clone(), i)).collect();
        Self { chunks, by_id }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn doc_ids(&self) -> HashSet<&str> {
        self.chunks.iter().map(Chunk::doc_id).collect()
    }

    /// Split `doc` and merge its chunks into a new KB; returns the KB and how many chunks survived dedup.
    pub fn with_document(&self, doc: &SourceDocument, cfg: &SplitConfig) -> Result<(Self, usize), IngestError> {
        cfg.validate()?;
        if self.doc_ids().contains(doc.doc_id.as_str()) {
            return Err(IngestError::DuplicateDocId(doc.doc_id.clone()));
        }
        let before = self.len();
        let mut all = self.chunks.clone();
        all.extend(split_into_chunks(doc, cfg));
        let merged = Self::from_chunks(deduplicate(all));
        let added = merged.len() - before;
        Ok((merged, added))
    }

    /// One JSON object per line, in chunk order.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for chunk in &self.chunks {
            out.push_str(&serde_json::to_string(chunk).expect("chunk serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, IngestError> {
        let mut chunks = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let chunk: Chunk = serde_json::from_str(line).map_err(|e| IngestError::Manifest { line: i + 1, message: e.to_string() })?;
            chunks.push(chunk);
        }
        let kb = Self::from_chunks(chunks);
        for c in kb.chunks() {
            for link in [&c.prev_id, &c.next_id].into_iter().flatten() {
                if kb.get(link).is_none() {
                    return Err(IngestError::Manifest { line: 0, message: format!("chunk `{}` links to missing `{link}`", c.chunk_id) });
                }
            }
        }
        Ok(kb)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), IngestError> {
        std::fs::write(path, self.to_manifest())?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<Self, IngestError> {
        Self::from_manifest(&std::fs::read_to_string(path)?)
    }
}

/// Split every document and de-duplicate globally.
pub fn build_knowledge_base(docs: &[SourceDocument], cfg: &SplitConfig) -> Result<KnowledgeBase, IngestError> {
    cfg.validate()?;
    let mut ids = HashSet::new();
    for d in docs {
        if !ids.insert(d.doc_id.as_str()) {
            return Err(IngestError::DuplicateDocId(d.doc_id.clone()));
        }
    }
    let chunks: Vec<Chunk> = docs.iter().flat_map(|d| split_into_chunks(d, cfg)).collect();
    Ok(KnowledgeBase::from_chunks(deduplicate(chunks)))
}

/// Parse raw documents (attaching the doc id to any parse error) and build the KB.
pub fn build_from_raw(raw: &[RawDocument], cfg: &SplitConfig) -> Result<KnowledgeBase, IngestError> {
    let docs = raw
        .iter()
        .map(|r| {
            r.parse().map_err(|e| match e {
                IngestError::Document { .. } => e,
                other => IngestError::Document { doc_id: r.doc_id.clone(), source: Box::new(other) },
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    build_knowledge_base(&docs, cfg)
}

#[derive(Debug, Clone, Default, Deserialize)]
struct DirMeta {
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    version_tag: Option<String>,
}

/// Read every `.md`/`.txt` file under `dir` (sorted by relative path).
///
/// An optional `_meta.json` maps relative paths to `{source, version_tag}`;
/// otherwise the source is the first path component (or `default_source`).
pub fn read_directory(dir: &Path, default_source: &str, default_version: &str) -> Result<Vec<RawDocument>, IngestError> {
    let meta: HashMap<String, DirMeta> = match std::fs::read_to_string(dir.join("_meta.json")) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| IngestError::InvalidConfig(format!("_meta.json: {e}")))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => HashMap::new(),
        Err(e) => return Err(e.into()),
    };
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut docs = Vec::new();
    for rel in files {
        let path = dir.join(&rel);
        let Some(format) = path.extension().and_then(|e| e.to_str()).and_then(DocFormat::from_extension) else {
            continue;
        };
        let bytes = std::fs::read(&path)?;
        let content = String::from_utf8(bytes)
            .map_err(|e| IngestError::InvalidEncoding { doc_id: rel.clone(), offset: e.utf8_error().valid_up_to() })?;
        let m = meta.get(&rel).cloned().unwrap_or_default();
        let source = m.source.unwrap_or_else(|| match rel.split_once('/') {
            Some((first, _)) => first.to_string(),
            None => default_source.to_string(),
        });
        let doc_id = rel.rsplit_once('.').map_or(rel.as_str(), |(stem, _)| stem).to_string();
        docs.push(RawDocument {
            doc_id,
            format: match format {
                DocFormat::Markdown => "markdown".into(),
                DocFormat::Plaintext => "plaintext".into(),
            },
            source,
            version_tag: m.version_tag.unwrap_or_else(|| default_version.to_string()),
            content,
        });
    }
    Ok(docs)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), IngestError> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != "_meta.json" {
                out.push(rel);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(doc: &str, ord: usize, text: &str) -> Chunk {
        Chunk::new(Chunk::make_id(doc, ord), text.into(), "v".into(), vec![], "s".into())
    }

    fn linked(mut v: Vec<Chunk>) -> Vec<Chunk> {
        link_in_order(&mut v);
        v
    }

    #[test]
    fn exact_duplicate_dropped_and_relinked() {
        let input = linked(vec![chunk("d", 0, "alpha"), chunk("d", 1, "alpha"), chunk("d", 2, "gamma")]);
        let out = deduplicate(input);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].chunk_id, "d#0000");
        assert_eq!(out[0].next_id.as_deref(), Some("d#0002"));
        assert_eq!(out[1].prev_id.as_deref(), Some("d#0000"));
    }

    #[test]
    fn no_duplicates_is_identity() {
        let input = linked(vec![chunk("d", 0, "a1"), chunk("d", 1, "b2"), chunk("e", 0, "c3")]);
        assert_eq!(deduplicate(input.clone()), input);
    }

    #[test]
    fn whitespace_variants_are_duplicates() {
        let out = deduplicate(vec![chunk("d", 0, "select  1\nfrom t"), chunk("e", 0, " select 1 from t ")]);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn seeded_duplicates_counted_by_pairwise_oracle() {
        // 83 distinct texts plus 17 copies of earlier ones.
        let mut texts: Vec<String> = (0..83).map(|i| format!("chunk number {i} body")).collect();
        for i in 0..17 {
            texts.insert(10 + i * 5, format!("chunk  number {}  body", i * 3));
        }
        let chunks: Vec<Chunk> = texts.iter().enumerate().map(|(i, t)| chunk("d", i, t)).collect();
        let naive_unique = (0..texts.len()).filter(|&i| (0..i).all(|j| text::normalize(&texts[j]) != text::normalize(&texts[i]))).count();
        assert_eq!(naive_unique, 83);
        assert_eq!(deduplicate(linked(chunks)).len(), naive_unique);
    }

    #[test]
    fn global_dedup_across_documents() {
        let faq = "## FAQ\nHow do I reset a password? Use ALTER USER.";
        let a = parse_document(format!("# A\nfirst doc\n{faq}").as_bytes(), DocFormat::Markdown, "a", "s", "v").unwrap();
        let b = parse_document(format!("# B\nsecond doc\n{faq}").as_bytes(), DocFormat::Markdown, "b", "s", "v").unwrap();
        let kb = build_knowledge_base(&[a, b], &SplitConfig::default()).unwrap();
        let faq_copies = kb.chunks().iter().filter(|c| c.text.contains("ALTER USER")).count();
        assert_eq!(faq_copies, 1);
        let b_first = kb.chunks().iter().find(|c| c.doc_id() == "b").unwrap();
        assert_eq!(b_first.next_id, None);
    }

    #[test]
    fn empty_kb_has_valid_empty_manifest() {
        let kb = build_knowledge_base(&[], &SplitConfig::default()).unwrap();
        assert!(kb.is_empty());
        assert_eq!(kb.to_manifest(), "");
        assert!(KnowledgeBase::from_manifest("").unwrap().is_empty());
    }

    #[test]
    fn manifest_field_order_and_hash_encoding() {
        let kb = KnowledgeBase::from_chunks(linked(vec![chunk("d", 0, "cpu cpu io")]));
        let line = kb.to_manifest();
        let expected_hash = text::content_hash("cpu cpu io");
        assert_eq!(
            line,
            format!(
                "{{\"chunk_id\":\"d#0000\",\"text\":\"cpu cpu io\",\"content_hash\":\"{expected_hash}\",\"version_tag\":\"v\",\"prev_id\":null,\"next_id\":null,\"heading_path\":[],\"source\":\"s\"}}\n"
            )
        );
        assert_eq!(KnowledgeBase::from_manifest(&line).unwrap(), kb);
    }

    #[test]
    fn manifest_rejects_dangling_links() {
        let mut c = chunk("d", 0, "x1");
        c.next_id = Some("d#0009".into());
        let text = serde_json::to_string(&c).unwrap();
        assert!(KnowledgeBase::from_manifest(&text).is_err());
    }

    #[test]
    fn parse_errors_carry_doc_id() {
        let raw = RawDocument {
            doc_id: "weird".into(),
            format: "docx".into(),
            source: "s".into(),
            version_tag: "v".into(),
            content: String::new(),
        };
        let err = build_from_raw(&[raw], &SplitConfig::default()).unwrap_err();
        assert!(err.to_string().contains("weird"), "{err}");
    }

    #[test]
    fn split_config_validation() {
        assert!(SplitConfig::from_json(r#"{"min_chars":10,"max_chars":5}"#).is_err());
        assert!(SplitConfig::from_json(r#"{"min_chars":0,"max_chars":5}"#).is_err());
        assert_eq!(SplitConfig::from_json(r#"{"min_chars":100,"max_chars":500}"#).unwrap(), SplitConfig { min_chars: 100, max_chars: 500 });
    }

    #[test]
    fn adding_a_document_reports_survivors() {
        let a = parse_document(b"# A\nshared text here", DocFormat::Markdown, "a", "s", "v").unwrap();
        let kb = build_knowledge_base(std::slice::from_ref(&a), &SplitConfig::default()).unwrap();
        let b = parse_document(b"# A\nshared text here\n# B\nnew text", DocFormat::Markdown, "b", "s", "v").unwrap();
        let (kb2, added) = kb.with_document(&b, &SplitConfig::default()).unwrap();
        assert_eq!(added, 1);
        assert_eq!(kb2.len(), 2);
        assert!(matches!(kb2.with_document(&a, &SplitConfig::default()), Err(IngestError::DuplicateDocId(_))));
    }
}
