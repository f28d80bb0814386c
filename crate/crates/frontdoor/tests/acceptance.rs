//! Acceptance run: one PASS/FAIL line per top-level criterion.
//! Everything runs against the scripted LLM and the in-process mock tools.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use axum::http::StatusCode;
use dbcopilot::bundled;
use dbcopilot::diag_agents::DiagnosisEngine;
use dbcopilot::eval_harness::{
    eval_answers, eval_intents, eval_tool_invocation, parse_jsonl, AnswerEvalCase, ContainsJudge, IntentEvalCase, ToolEvalCase,
};
use dbcopilot::kb_ingest::{
    build_from_raw, deduplicate, parse_document, split_into_chunks, BlockKind, Chunk, DocFormat, KnowledgeBase, SplitConfig,
};
use dbcopilot::llm_backend::ScriptedBackend;
use dbcopilot::retrieval::{rerank, DenseIndex, Embedder, FeatureHashEmbedder, LexicalOverlapReranker, ScoredChunk, SparseIndex, Stage};
use dbcopilot::safety::{detect_words, CheckStage, SafetyGate, SensitiveLexicon, WordMatch};
use dbcopilot::text::fold_for_matching;
use dbcopilot::tool_registry::mock_server::{InProcessInvoker, MockToolset};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toks(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| w.chars().count() >= 2).map(String::from).collect()
}

const VOCAB: &[&str] = &[
    "index",
    "vacuum",
    "cpu",
    "disk",
    "io",
    "lock",
    "wait",
    "session",
    "query",
    "plan",
    "scan",
    "table",
    "row",
    "commit",
    "backup",
    "restore",
    "wal",
    "checkpoint",
    "buffer",
    "memory",
    "node",
    "standby",
    "primary",
    "partition",
    "role",
    "grant",
    "audit",
    "snapshot",
    "report",
    "metric",
    "alarm",
    "tuple",
    "dead",
    "slow",
    "sql",
    "join",
    "hash",
    "btree",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    let mut words: Vec<String> = (0..n).map(|_| VOCAB.choose(rng).unwrap().to_string()).collect();
    if rng.gen_bool(0.2) {
        words.push("x, y.".into());
    }
    if rng.gen_bool(0.2) {
        words[0] = words[0].to_uppercase();
    }
    words.join(" ")
}

fn kb_of(texts: &[(String, String)]) -> KnowledgeBase {
    KnowledgeBase::from_chunks(texts.iter().map(|(id, t)| Chunk::new(id.clone(), t.clone(), "v".into(), vec![], "s".into())).collect())
}

fn engine(scenario: &str) -> DiagnosisEngine {
    let toolset = MockToolset::new(&bundled::scenarios().unwrap(), scenario);
    DiagnosisEngine::bundled(Arc::new(InProcessInvoker { toolset }), Arc::new(bundled::scripted_llm())).unwrap()
}

fn tool_invocation() -> Outcome {
    let cases: Vec<ToolEvalCase> = parse_jsonl(bundled::eval::TOOL_CASES).map_err(|e| e.to_string())?;
    ensure(cases.len() == 120, || format!("{} cases", cases.len()))?;
    let registry = bundled::tool_registry().unwrap();
    let llm = bundled::scripted_llm();
    let t = Instant::now();
    let r = eval_tool_invocation(&cases, &registry, Some(&llm)).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let detail = format!("selection_accuracy={:.4} param_fill_accuracy={:.4} in {secs:.2}s", r.selection_accuracy, r.param_fill_accuracy);
    ensure(r.selection_accuracy >= 0.95 && r.param_fill_accuracy >= 0.99 && secs < 30.0, || detail.clone())?;
    Ok(detail)
}

fn answer_quality() -> Outcome {
    let cases: Vec<AnswerEvalCase> = parse_jsonl(bundled::eval::ANSWER_CASES).map_err(|e| e.to_string())?;
    ensure(cases.len() == 60, || format!("{} cases", cases.len()))?;
    let pipeline = bundled::qa_pipeline(Arc::new(bundled::scripted_llm()))?;
    let t = Instant::now();
    let r = eval_answers(&cases, &pipeline, &ContainsJudge).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let detail = format!("high_quality_ratio={:.4} in {secs:.2}s", r.high_quality_ratio);
    ensure(r.high_quality_ratio >= 0.85 && secs < 60.0, || detail.clone())?;
    Ok(detail)
}

const ALPHABET: &[&str] = &["a", "b", "c", "ab", "A", "é", "e\u{301}", "数", "据", " ", "-"];

fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    (0..rng.gen_range(1..=max_len)).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

fn naive_scan(words: &[String], text: &str) -> Vec<WordMatch> {
    let folded = fold_for_matching(text);
    let unique: BTreeSet<String> = words.iter().map(|w| fold_for_matching(w.trim())).filter(|w| !w.is_empty()).collect();
    let mut out = Vec::new();
    for w in &unique {
        for (pos, _) in folded.char_indices() {
            if folded[pos..].starts_with(w.as_str()) {
                out.push(WordMatch { word: w.clone(), offset: pos });
            }
        }
    }
    out.sort_by(|a, b| a.offset.cmp(&b.offset).then(a.word.len().cmp(&b.word.len())));
    out
}

fn detector() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ran = 0;
    let mut mismatches = 0;
    while ran < 1000 {
        let words: Vec<String> = (0..rng.gen_range(1..=12)).map(|_| random_string(&mut rng, 4)).filter(|w| !w.trim().is_empty()).collect();
        if words.is_empty() {
            continue;
        }
        let text = random_string(&mut rng, 60);
        let lex = SensitiveLexicon::build(&words).map_err(|e| e.to_string())?;
        if detect_words(&text, &lex) != naive_scan(&words, &text) {
            mismatches += 1;
        }
        ran += 1;
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatches in {ran} cases"))?;

    let letters: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
    let words: Vec<String> =
        (0..20_000).map(|_| (0..rng.gen_range(6..=12)).map(|_| *letters.choose(&mut rng).unwrap()).collect()).collect();
    let mut text = String::new();
    while text.len() < 10 * 1024 {
        let w: String = (0..rng.gen_range(2..=9)).map(|_| *letters.choose(&mut rng).unwrap()).collect();
        text.push_str(&w);
        text.push(' ');
    }
    text.push_str(&words[777]);
    let gate = SafetyGate::new(SensitiveLexicon::build(&words).unwrap(), Arc::new(bundled::classifier().unwrap()));
    let t = Instant::now();
    let verdict = gate.check(&text, CheckStage::PostAnswer);
    let ms = t.elapsed().as_secs_f64() * 1000.0;
    ensure(verdict.blocked, || "planted word not caught".into())?;
    ensure(ms < 500.0, || format!("check took {ms:.1}ms"))?;
    Ok(format!("{ran} cases, 0 mismatches; 10 KB x 20k words checked in {ms:.1}ms"))
}

fn bm25_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for round in 0..200 {
        let n_docs = rng.gen_range(1..=100);
        let docs: Vec<(String, String)> = (0..n_docs).map(|i| (format!("d{i:03}"), random_text(&mut rng, 30))).collect();
        let index = SparseIndex::from_texts(docs.iter().map(|(a, b)| (a.as_str(), b.as_str())));
        let query = random_text(&mut rng, 5);
        let k = rng.gen_range(1..=n_docs);

        let tokenized: Vec<Vec<String>> = docs.iter().map(|(_, t)| toks(t)).collect();
        let n = n_docs as f64;
        let avgdl = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let terms: BTreeSet<String> = toks(&query).into_iter().collect();
        let mut want: Vec<(String, f64)> = Vec::new();
        for ((id, _), doc) in docs.iter().zip(&tokenized) {
            let mut score = None;
            for term in &terms {
                let tf = doc.iter().filter(|t| *t == term).count() as f64;
                if tf > 0.0 {
                    let df = tokenized.iter().filter(|d| d.contains(term)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    *score.get_or_insert(0.0) += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * doc.len() as f64 / avgdl));
                }
            }
            if let Some(s) = score {
                want.push((id.clone(), s));
            }
        }
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(k);
        let got = index.search(&query, k);
        ensure(got.len() == want.len(), || format!("round {round}: {} vs {} results", got.len(), want.len()))?;
        for (g, (id, s)) in got.iter().zip(&want) {
            ensure(&g.chunk_id == id && (g.score - s).abs() < 1e-9, || format!("round {round}: {} {} vs {id} {s}", g.chunk_id, g.score))?;
        }
    }
    Ok("200 queries, scores within 1e-9, rankings identical".into())
}

fn dense_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let embedder = FeatureHashEmbedder::default();
    let texts: Vec<(String, String)> = (0..200).map(|i| (format!("c{i:03}"), random_text(&mut rng, 25))).collect();
    let index = DenseIndex::build(&kb_of(&texts), &embedder);
    let raw: Vec<(&str, Vec<f64>)> = texts.iter().map(|(id, t)| (id.as_str(), embedder.embed(t).0)).collect();
    for q in 0..100 {
        let query = random_text(&mut rng, 6);
        let k = rng.gen_range(1..=20);
        let qv = embedder.embed(&query);
        let got = index.search(&qv, k).map_err(|e| e.to_string())?;
        let qn = qv.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut want: Vec<(f64, &str)> = raw
            .iter()
            .filter_map(|(id, v)| {
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (vn > 0.0 && qn > 0.0).then(|| (qv.0.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (qn * vn), *id))
            })
            .collect();
        want.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let by_id: BTreeMap<&str, f64> = want.iter().map(|(s, id)| (*id, *s)).collect();
        want.truncate(k);
        ensure(got.len() == want.len(), || format!("query {q}: {} vs {}", got.len(), want.len()))?;
        // ties in cosine can flip in the last ulp, so equal ranks are compared by score
        for (g, w) in got.iter().zip(&want) {
            ensure((g.score - w.0).abs() < 1e-12 && (by_id[g.chunk_id.as_str()] - g.score).abs() < 1e-12, || {
                format!("query {q}: {} {} vs {} {}", g.chunk_id, g.score, w.1, w.0)
            })?;
        }
    }
    Ok("100 queries over 200 chunks equal the exhaustive scan".into())
}

fn rerank_threshold() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let texts: Vec<(String, String)> = (0..80).map(|i| (format!("r{i:02}"), random_text(&mut rng, 20))).collect();
    let kb = kb_of(&texts);
    let reranker = LexicalOverlapReranker::default();
    let mut returned = 0;
    for list in 0..500 {
        let n = rng.gen_range(0..=30);
        let cands: Vec<ScoredChunk> =
            texts.choose_multiple(&mut rng, n).map(|(id, _)| ScoredChunk::new(id, rng.gen::<f64>(), Stage::Fused)).collect();
        let query = if rng.gen_bool(0.1) { "zz qq".to_string() } else { random_text(&mut rng, 6) };
        let out = rerank(&reranker, &query, &cands, &kb).map_err(|e| e.to_string())?;
        ensure(out.iter().all(|s| s.score >= 0.0), || format!("list {list}: negative score returned"))?;
        returned += out.len();
    }
    Ok(format!("500 lists, {returned} scores returned, none below 0"))
}

fn random_markdown(rng: &mut ChaCha8Rng) -> (String, usize) {
    let mut parts = Vec::new();
    let mut atomic = 0;
    for _ in 0..rng.gen_range(1..25) {
        parts.push(match rng.gen_range(0..7) {
            0 => format!("{} {}", "#".repeat(rng.gen_range(1..4)), random_text(rng, 4)),
            1 => {
                atomic += 1;
                let mut body = vec![random_text(rng, 20)];
                for _ in 0..rng.gen_range(0..8) {
                    body.push(match rng.gen_range(0..3) {
                        0 => String::new(),
                        1 => "# not a heading".into(),
                        _ => random_text(rng, 20),
                    });
                }
                format!("```sql\n{}\n```", body.join("\n"))
            }
            2 => {
                atomic += 1;
                let mut t = "| name | value |\n|------|-------|".to_string();
                for r in 0..rng.gen_range(1..20) {
                    t.push_str(&format!("\n| row{r} | {} |", r * 3));
                }
                t
            }
            _ => random_text(rng, 80),
        });
    }
    (parts.join("\n\n"), atomic)
}

fn ingestion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    for case in 0..200 {
        let min = rng.gen_range(20..300);
        let cfg = SplitConfig { min_chars: min, max_chars: min + rng.gen_range(0..600) };
        let (text, atomic) = random_markdown(&mut rng);
        let doc = parse_document(text.as_bytes(), DocFormat::Markdown, "doc", "s", "v").map_err(|e| e.to_string())?;
        let chunks = split_into_chunks(&doc, &cfg);
        let rendered: Vec<String> = doc.blocks.iter().map(|b| b.render()).collect();
        let joined: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        ensure(joined.join("\n\n") == rendered.join("\n\n"), || format!("case {case}: text not covered"))?;
        let blocks = doc.blocks.iter().filter(|b| matches!(b.kind, BlockKind::CodeFence { .. } | BlockKind::Table));
        ensure(blocks.clone().count() == atomic, || format!("case {case}: fence/table count"))?;
        for b in blocks {
            let whole = b.render();
            ensure(chunks.iter().any(|c| c.text.contains(&whole)), || format!("case {case}: block split"))?;
        }
        let twin = parse_document(text.as_bytes(), DocFormat::Markdown, "twin", "s", "v").unwrap();
        let mut all = chunks.clone();
        all.extend(split_into_chunks(&twin, &cfg));
        let once = deduplicate(all);
        ensure(deduplicate(once.clone()) == once, || format!("case {case}: dedup not idempotent"))?;
    }
    let a = bundled::knowledge_base().map_err(|e| e.to_string())?.to_manifest();
    let b = build_from_raw(&bundled::corpus_documents(), &SplitConfig::default()).unwrap().to_manifest();
    ensure(bundled::corpus_documents().len() == 12, || "corpus size".into())?;
    ensure(a == b, || "manifests differ across builds".into())?;
    ensure(KnowledgeBase::from_manifest(&a).unwrap().to_manifest() == a, || "manifest round trip".into())?;
    Ok(format!("200 random docs; 12-doc corpus manifest byte-identical ({} bytes)", a.len()))
}

fn diagnosis_e2e() -> Outcome {
    let first = engine("high_io").run_diagnosis("Abnormal I/O Usage").map_err(|e| e.to_string())?.report.ok_or("no report")?;
    for run in 1..10 {
        let again = engine("high_io").run_diagnosis("Abnormal I/O Usage").unwrap().report.unwrap();
        ensure(again.trace == first.trace && again.to_json() == first.to_json(), || format!("run {} differs", run + 1))?;
    }
    ensure(first.recruited_experts.iter().any(|e| e.name == "Resource Expert"), || "Resource Expert not recruited".into())?;
    let tools: Vec<&str> = first.tool_calls.iter().map(|c| c.call.tool_name.as_str()).collect();
    ensure(tools.starts_with(&["metric_inspect", "io_topk_process", "slow_sql_rca"]), || format!("tools {tools:?}"))?;
    let rc = first.root_causes.first().ok_or("no root cause")?;
    ensure(rc.cause.contains("full table scan on orders"), || rc.cause.clone())?;
    ensure(rc.recommendation.starts_with("Index optimization"), || rc.recommendation.clone())?;
    Ok(format!("10/10 identical traces ({} events); {}", first.trace.len(), tools.join("->")))
}

async fn elicitation() -> Outcome {
    let app = common::app(&common::state("slow_query"));
    let id = common::start_diagnosis(&app, "Slow query alarm on the invoice search").await;
    let v = common::settle(&app, &id).await;
    ensure(v["state"] == "awaiting_params", || format!("state {}", v["state"]))?;
    let pending: Vec<&str> = v["pending_params"].as_array().ok_or("no pending_params")?.iter().filter_map(|p| p["name"].as_str()).collect();
    ensure(pending.contains(&"db_name"), || format!("pending {pending:?}"))?;
    let values = json!({"values": {"sql": "SELECT * FROM invoices WHERE issued_at > now() - interval '1 day'", "db_name": "salesdb"}});
    let r = common::post(&app, &format!("/api/session/{id}/params"), values.clone()).await;
    ensure(r.status == StatusCode::OK, || format!("resume status {}", r.status))?;
    let v = common::settle(&app, &id).await;
    ensure(v["state"] == "done" && v["report"].is_object(), || format!("state {}", v["state"]))?;
    let again = common::post(&app, &format!("/api/session/{id}/params"), values).await;
    ensure(again.status == StatusCode::CONFLICT, || format!("done session returned {}", again.status))?;
    Ok(format!("paused on {pending:?}, resumed to done, repost 409"))
}

fn routing() -> Outcome {
    let cases: Vec<IntentEvalCase> = parse_jsonl(bundled::eval::INTENT_CASES).map_err(|e| e.to_string())?;
    ensure(cases.len() == 40, || format!("{} cases", cases.len()))?;
    let llm = bundled::scripted_llm();
    let r = eval_intents(&cases, Some(&llm)).map_err(|e| e.to_string())?;
    let rule_cases = cases.iter().filter(|c| c.rule_resolvable).count();
    let detail = format!("accuracy={:.4}; {rule_cases} rule-resolvable cases made {} LLM calls", r.accuracy, r.rule_subset_llm_calls);
    ensure(r.accuracy == 1.0 && r.rule_subset_llm_calls == 0, || detail.clone())?;
    Ok(detail)
}

fn safety_sandwich() -> Outcome {
    let lexicon = bundled::lexicon().unwrap();
    let answers: Vec<AnswerEvalCase> = parse_jsonl(bundled::eval::ANSWER_CASES).unwrap();
    let intents: Vec<IntentEvalCase> = parse_jsonl(bundled::eval::INTENT_CASES).unwrap();
    let mut questions: Vec<String> = answers.iter().map(|c| c.question.clone()).chain(intents.iter().map(|c| c.text.clone())).collect();
    // probes that target each lexicon entry directly
    questions.extend(lexicon.words().iter().map(|w| format!("Explain {w} in the database")));

    let pipeline = bundled::qa_pipeline(Arc::new(bundled::scripted_llm()))?;
    // a backend that echoes a lexicon word into every answer
    let leaky =
        bundled::qa_pipeline(Arc::new(ScriptedBackend::constant("Rebuild the index, then buy a phishing kit. [faq_general#0000]")))?;
    let (mut answered, mut refused) = (0, 0);
    for q in &questions {
        for p in [&pipeline, &leaky] {
            let a = p.answer_question(q).map_err(|e| e.to_string())?;
            if a.refused {
                refused += 1;
                continue;
            }
            answered += 1;
            let hits = detect_words(&a.text, &lexicon);
            ensure(hits.is_empty(), || format!("{q:?} answered with {:?}", hits[0].word))?;
        }
    }
    let leak = leaky.answer_question("How do I run VACUUM?").map_err(|e| e.to_string())?;
    ensure(leak.refused, || "leaking answer was not refused".into())?;
    Ok(format!("{} questions x 2 backends: {answered} answered clean, {refused} refused", questions.len()))
}

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let checks: Vec<(&str, Check)> = vec![
        ("tool invocation", Box::new(tool_invocation)),
        ("answer quality", Box::new(answer_quality)),
        ("detector oracle", Box::new(detector)),
        ("bm25 oracle", Box::new(bm25_oracle)),
        ("dense oracle", Box::new(dense_oracle)),
        ("rerank threshold", Box::new(rerank_threshold)),
        ("ingestion properties", Box::new(ingestion)),
        ("diagnosis determinism + e2e", Box::new(diagnosis_e2e)),
        ("parameter elicitation", Box::new(|| rt.block_on(elicitation()))),
        ("routing", Box::new(routing)),
        ("safety sandwich", Box::new(safety_sandwich)),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
