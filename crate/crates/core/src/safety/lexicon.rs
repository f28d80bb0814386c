//! Sensitive-word trie with failure links (Aho-Corasick).
//!
//! Words and scanned text are folded the same way (lowercase + NFC) and
//! matched byte-wise, so every match offset is a byte offset into the
//! folded text and always lands on a char boundary.

use std::collections::VecDeque;

use serde::Serialize;

use super::SafetyError;
use crate::text::fold_for_matching;

const ROOT: u32 = 0;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct State {
    /// Sorted by byte.
    next: Vec<(u8, u32)>,
    fail: u32,
    /// Index into `words` when this state terminates a word.
    word: u32,
    /// Nearest terminal state along the failure chain.
    dict: u32,
}

impl State {
    fn new() -> Self {
        Self { next: Vec::new(), fail: ROOT, word: NONE, dict: NONE }
    }

    fn goto(&self, b: u8) -> Option<u32> {
        self.next.binary_search_by_key(&b, |(k, _)| *k).ok().map(|i| self.next[i].1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WordMatch {
    pub word: String,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct SensitiveLexicon {
    states: Vec<State>,
    words: Vec<String>,
}

impl Default for SensitiveLexicon {
    fn default() -> Self {
        Self { states: vec![State::new()], words: Vec::new() }
    }
}

impl SensitiveLexicon {
    pub fn build<S: AsRef<str>>(words: &[S]) -> Result<Self, SafetyError> {
        let mut lex = Self::default();
        for (i, w) in words.iter().enumerate() {
            let folded = fold_for_matching(w.as_ref().trim());
            if folded.is_empty() {
                return Err(SafetyError::EmptyWord { index: i });
            }
            lex.insert(folded);
        }
        lex.link();
        Ok(lex)
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn parse_file(content: &str) -> Result<Self, SafetyError> {
        Self::build(&lexicon_lines(content))
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains_word(&self, word: &str) -> bool {
        let folded = fold_for_matching(word.trim());
        let mut s = ROOT;
        for b in folded.bytes() {
            match self.states[s as usize].goto(b) {
                Some(n) => s = n,
                None => return false,
            }
        }
        !folded.is_empty() && self.states[s as usize].word != NONE
    }

    fn insert(&mut self, word: String) {
        let mut s = ROOT;
        for b in word.bytes() {
            s = match self.states[s as usize].goto(b) {
                Some(n) => n,
                None => {
                    let id = self.states.len() as u32;
                    self.states.push(State::new());
                    let next = &mut self.states[s as usize].next;
                    let pos = next.partition_point(|(k, _)| *k < b);
                    next.insert(pos, (b, id));
                    id
                }
            };
        }
        if self.states[s as usize].word == NONE {
            self.states[s as usize].word = self.words.len() as u32;
            self.words.push(word);
        }
    }

    /// Breadth-first failure and dictionary-suffix links.
    fn link(&mut self) {
        let mut queue = VecDeque::new();
        for &(_, child) in &self.states[ROOT as usize].next.clone() {
            self.states[child as usize].fail = ROOT;
            queue.push_back(child);
        }
        while let Some(s) = queue.pop_front() {
            for (b, child) in self.states[s as usize].next.clone() {
                let mut f = self.states[s as usize].fail;
                let target = loop {
                    if let Some(n) = self.states[f as usize].goto(b) {
                        break n;
                    }
                    if f == ROOT {
                        break ROOT;
                    }
                    f = self.states[f as usize].fail;
                };
                let fail_state = &self.states[target as usize];
                let dict = if fail_state.word != NONE { target } else { fail_state.dict };
                let c = &mut self.states[child as usize];
                c.fail = target;
                c.dict = dict;
                queue.push_back(child);
            }
        }
    }

    /// Every occurrence of every word in the folded text, overlaps included,
    /// ordered by offset then word length.
    pub fn detect(&self, text: &str) -> Vec<WordMatch> {
        let folded = fold_for_matching(text);
        let mut out = Vec::new();
        if self.words.is_empty() {
            return out;
        }
        let mut s = ROOT;
        for (i, b) in folded.bytes().enumerate() {
            loop {
                if let Some(n) = self.states[s as usize].goto(b) {
                    s = n;
                    break;
                }
                if s == ROOT {
                    break;
                }
                s = self.states[s as usize].fail;
            }
            let st = &self.states[s as usize];
            let mut hit = if st.word != NONE { s } else { st.dict };
            while hit != NONE {
                let h = &self.states[hit as usize];
                let word = &self.words[h.word as usize];
                out.push(WordMatch { word: word.clone(), offset: i + 1 - word.len() });
                hit = h.dict;
            }
        }
        out.sort_by(|a, b| a.offset.cmp(&b.offset).then(a.word.len().cmp(&b.word.len())));
        out
    }
}

pub(crate) fn lexicon_lines(content: &str) -> Vec<&str> {
    content.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect()
}

/// Result of validating a lexicon file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LexiconReport {
    pub words: usize,
    pub duplicates: Vec<String>,
    pub comment_or_blank_lines: usize,
}

pub fn check_lexicon_file(content: &str) -> Result<LexiconReport, SafetyError> {
    let lines = lexicon_lines(content);
    let lex = SensitiveLexicon::build(&lines)?;
    let mut seen = std::collections::HashSet::new();
    let duplicates = lines.iter().map(|l| fold_for_matching(l)).filter(|w| !seen.insert(w.clone())).collect();
    Ok(LexiconReport { words: lex.word_count(), duplicates, comment_or_blank_lines: content.lines().count() - lines.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(words: &[&str], text: &str) -> Vec<WordMatch> {
        let folded = fold_for_matching(text);
        let mut uniq: Vec<String> = words.iter().map(|w| fold_for_matching(w)).collect();
        uniq.sort();
        uniq.dedup();
        let mut out = Vec::new();
        for w in &uniq {
            for start in 0..folded.len() {
                if folded.as_bytes()[start..].starts_with(w.as_bytes()) {
                    out.push(WordMatch { word: w.clone(), offset: start });
                }
            }
        }
        out.sort_by(|a, b| a.offset.cmp(&b.offset).then(a.word.len().cmp(&b.word.len())));
        out
    }

    #[test]
    fn empty_lexicon_matches_nothing() {
        let lex = SensitiveLexicon::build::<&str>(&[]).unwrap();
        assert!(lex.detect("drop table").is_empty());
    }

    #[test]
    fn single_word_at_zero() {
        let lex = SensitiveLexicon::build(&["drop"]).unwrap();
        assert_eq!(lex.detect("drop table"), vec![WordMatch { word: "drop".into(), offset: 0 }]);
    }

    #[test]
    fn classic_ushers_example() {
        let lex = SensitiveLexicon::build(&["he", "she", "hers"]).unwrap();
        let got = lex.detect("ushers");
        let want = vec![
            WordMatch { word: "she".into(), offset: 1 },
            WordMatch { word: "he".into(), offset: 2 },
            WordMatch { word: "hers".into(), offset: 2 },
        ];
        assert_eq!(got, want);
        assert_eq!(got, naive(&["he", "she", "hers"], "ushers"));
    }

    #[test]
    fn no_hits_and_empty_text() {
        let lex = SensitiveLexicon::build(&["secret"]).unwrap();
        assert!(lex.detect("nothing here").is_empty());
        assert!(lex.detect("").is_empty());
    }

    #[test]
    fn empty_word_rejected() {
        assert!(matches!(SensitiveLexicon::build(&["ok", "  "]), Err(SafetyError::EmptyWord { index: 1 })));
    }

    #[test]
    fn case_folding_and_unicode() {
        let lex = SensitiveLexicon::build(&["Café", "密码"]).unwrap();
        let hits = lex.detect("CAFE\u{301} and 获取密码");
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].word, "café");
        assert_eq!(hits[1].word, "密码");
    }

    #[test]
    fn file_format_and_check() {
        let content = "# comment\nrm -rf\n\nDROP DATABASE\ndrop database\n";
        let report = check_lexicon_file(content).unwrap();
        assert_eq!(report.words, 2);
        assert_eq!(report.duplicates, vec!["drop database".to_string()]);
        assert_eq!(report.comment_or_blank_lines, 2);
        let lex = SensitiveLexicon::parse_file(content).unwrap();
        assert!(lex.contains_word("rm -rf"));
        assert!(!lex.contains_word("rm"));
    }

    #[test]
    fn shared_prefixes_and_nested_words() {
        let words = ["abc", "bc", "c", "abcd", "bcd"];
        let lex = SensitiveLexicon::build(&words).unwrap();
        for text in ["abcd", "xabcdabc", "cccc", "bcbcd"] {
            assert_eq!(lex.detect(text), naive(&words, text), "text {text}");
        }
    }
}
