//! Text primitives shared by ingestion, retrieval and safety.

use std::hash::Hasher;

use fnv::FnvHasher;
use unicode_normalization::UnicodeNormalization;

/// Trim, collapse internal whitespace runs to one space, then NFC.
pub fn normalize(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.nfc().collect()
}

/// 64-bit FNV-1a over the UTF-8 bytes of `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(bytes);
    hasher.finish()
}

/// Content hash of a chunk: FNV-1a of the normalized text.
pub fn content_hash(text: &str) -> u64 {
    fnv1a64(normalize(text).as_bytes())
}

/// Lowercase, split on non-alphanumeric characters, keep tokens of two or more chars.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|tok| tok.chars().count() >= 2).map(|tok| tok.to_lowercase()).collect()
}

/// Lowercase + NFC, used before sensitive-word matching.
pub fn fold_for_matching(text: &str) -> String {
    text.to_lowercase().nfc().collect()
}
