use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use dbcopilot::bundled;
use dbcopilot::safety::{CheckStage, SafetyGate, SensitiveLexicon, WordMatch};
use dbcopilot::text::fold_for_matching;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// small alphabet so overlaps and shared prefixes are common
const ALPHABET: &[&str] = &["a", "b", "c", "ab", "A", "é", "e\u{301}", "数", "据", " ", "-"];

fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

fn naive_scan(words: &[String], text: &str) -> Vec<WordMatch> {
    let folded = fold_for_matching(text);
    let unique: BTreeSet<String> = words.iter().map(|w| fold_for_matching(w.trim())).filter(|w| !w.is_empty()).collect();
    let mut out = Vec::new();
    for w in &unique {
        let mut start = 0;
        while let Some(pos) = folded[start..].find(w.as_str()) {
            out.push(WordMatch { word: w.clone(), offset: start + pos });
            // step one char so overlapping occurrences are found
            start += pos + folded[start + pos..].chars().next().unwrap().len_utf8();
        }
    }
    out.sort_by(|a, b| a.offset.cmp(&b.offset).then(a.word.len().cmp(&b.word.len())));
    out
}

#[test]
fn detector_matches_naive_scan_on_1000_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..1000 {
        let n_words = rng.gen_range(1..=12);
        let words: Vec<String> = (0..n_words).map(|_| random_string(&mut rng, 4)).filter(|w| !w.trim().is_empty()).collect();
        if words.is_empty() {
            continue;
        }
        let text = random_string(&mut rng, 60);
        let lex = SensitiveLexicon::build(&words).unwrap();
        assert_eq!(lex.detect(&text), naive_scan(&words, &text), "case {case}: words {words:?} text {text:?}");
    }
}

#[test]
fn offsets_land_on_char_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..200 {
        let words: Vec<String> = (0..5).map(|_| random_string(&mut rng, 3)).filter(|w| !w.trim().is_empty()).collect();
        if words.is_empty() {
            continue;
        }
        let text = random_string(&mut rng, 40);
        let folded = fold_for_matching(&text);
        for m in SensitiveLexicon::build(&words).unwrap().detect(&text) {
            assert!(folded.is_char_boundary(m.offset));
            assert_eq!(&folded[m.offset..m.offset + m.word.len()], m.word);
        }
    }
}

#[test]
fn check_on_10kb_with_20k_words_is_fast() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let letters: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
    let words: Vec<String> =
        (0..20_000).map(|_| (0..rng.gen_range(6..=12)).map(|_| *letters.choose(&mut rng).unwrap()).collect()).collect();
    let mut text = String::new();
    while text.len() < 10 * 1024 {
        let w: String = (0..rng.gen_range(2..=9)).map(|_| *letters.choose(&mut rng).unwrap()).collect();
        text.push_str(&w);
        text.push(' ');
    }
    text.push_str(&words[1234]);
    let gate = SafetyGate::new(SensitiveLexicon::build(&words).unwrap(), Arc::new(bundled::classifier().unwrap()));
    let start = Instant::now();
    let verdict = gate.check(&text, CheckStage::PreQuestion);
    let elapsed = start.elapsed();
    assert!(verdict.blocked);
    assert!(verdict.matched_words.iter().any(|m| m.word == words[1234]));
    assert!(elapsed.as_millis() < 500, "check took {elapsed:?}");
}
