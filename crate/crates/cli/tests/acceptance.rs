//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs offline against the fixture corpus and the mock backend.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use medrag_core::cache::{AnswerCache, CacheConfig, CacheStrategy, CachedAnswer};
use medrag_core::corpus::{chunk_document, expected_chunk_count, ingest_corpus, ChunkConfig, Document};
use medrag_core::embed::{Embedder, EmbedderConfig, Embedding, LocalEmbedder};
use medrag_core::eval::{self, Rounding};
use medrag_core::index::{IndexEntry, VectorIndex};
use medrag_core::llm::{generate, top_p_filter, FinishReason, Generation, GenerationParams, MockBackend};
use medrag_core::session::{Intent, PersonaStrings, Session};
use medrag_core::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    check: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "reference-eval-reproduction",
            limit: Some(Duration::from_secs(1)),
            check: reference_eval_reproduction,
        },
        Criterion {
            name: "s-metric-properties",
            limit: Some(Duration::from_secs(10)),
            check: s_metric_properties,
        },
        Criterion {
            name: "retrieval-oracle-equivalence",
            limit: Some(Duration::from_secs(30)),
            check: retrieval_oracle,
        },
        Criterion {
            name: "chunker-conservation",
            limit: None,
            check: chunker_conservation,
        },
        Criterion {
            name: "cache-semantics",
            limit: None,
            check: cache_semantics,
        },
        Criterion {
            name: "end-to-end-offline",
            limit: None,
            check: end_to_end,
        },
        Criterion {
            name: "small-talk-bypass",
            limit: None,
            check: small_talk_bypass,
        },
        Criterion {
            name: "mock-sampler",
            limit: None,
            check: mock_sampler,
        },
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(()), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(()) => println!("PASS {:<30} {:>8.3}s", c.name, elapsed.as_secs_f64()),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:<30} {:>8.3}s  {reason}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn d(s: &str) -> Decimal {
    Decimal::from_str(s).unwrap()
}

fn reference_eval_reproduction() -> Check {
    const E: [&str; 20] = [
        "0.625", "0.605", "0.635", "0.535", "0.665", "0.55", "0.695", "0.63", "0.6", "0.555", "0.595", "0.585", "0.535",
        "0.595", "0.56", "0.63", "0.545", "0.745", "0.52", "0.565",
    ];
    let text = std::fs::read_to_string(fixtures().join("reference_eval.csv")).map_err(|e| e.to_string())?;
    let inputs = eval::parse_items_csv(&text).map_err(|e| e.to_string())?;
    let run = eval::run_eval(&inputs, &BTreeMap::new(), &eval::default_n_values(), &Rounding::default())
        .map_err(|e| e.to_string())?;
    ensure!(run.records.len() == 20, "expected 20 rows, got {}", run.records.len());
    for (i, (record, e)) in run.records.iter().zip(E).enumerate() {
        ensure!(record.e == Some(d(e)), "row {}: E = {:?}, expected {e}", i + 1, record.e);
    }
    let s = run.summary.ok_or("no summary")?;
    let rounded = (s.rounded_mean_s, s.rounded_mean_g, s.rounded_mean_e);
    ensure!(rounded == (d("0.28"), d("0.92"), d("0.6")), "rounded means {rounded:?}");
    let mean_e: f64 = s.mean_e.to_string().parse().unwrap();
    ensure!((mean_e - 0.5985).abs() <= 1e-12, "mean E {mean_e}");
    ensure!((mean_e - 0.598).abs() <= 0.0005 + 1e-12, "mean E {mean_e} too far from 0.598");
    Ok(())
}

fn words(rng: &mut ChaCha8Rng, vocab: &[&str], max_len: usize) -> String {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| *vocab.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn s_metric_properties() -> Check {
    let n = eval::default_n_values();
    let left = ["alpha", "beta", "gamma", "delta", "liver", "virus", "b", "c"];
    let right = ["kidney", "renal", "tubule", "nephron", "x", "y"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let x = words(&mut rng, &left, 15);
        let y = words(&mut rng, &left, 15);
        let z = words(&mut rng, &right, 15);
        let sxy = eval::similarity_score(&x, &y, &n).map_err(|e| e.to_string())?;
        let syx = eval::similarity_score(&y, &x, &n).map_err(|e| e.to_string())?;
        let sxx = eval::similarity_score(&x, &x, &n).map_err(|e| e.to_string())?;
        let sxz = eval::similarity_score(&x, &z, &n).map_err(|e| e.to_string())?;
        ensure!((0.0..=1.0).contains(&sxy), "case {case}: S = {sxy} out of range");
        ensure!((sxx - 1.0).abs() <= 1e-12, "case {case}: S(x,x) = {sxx}");
        ensure!((sxy - syx).abs() <= 1e-12, "case {case}: asymmetric {sxy} vs {syx}");
        ensure!(sxz == 0.0, "case {case}: disjoint S = {sxz}");
        let oracle = support::oracle_similarity(&x, &y);
        ensure!((sxy - oracle).abs() <= 1e-12, "case {case}: S = {sxy}, oracle {oracle}");
    }
    let unigram = BTreeSet::from([1]);
    let hand = eval::similarity_score("a b c d", "a b x y", &unigram).map_err(|e| e.to_string())?;
    ensure!(hand == 0.5, "hand case gave {hand}");
    Ok(())
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<i64> {
    loop {
        let v: Vec<i64> = (0..dim).map(|_| rng.gen_range(-4..=4)).collect();
        if v.iter().any(|&x| x != 0) {
            return v;
        }
    }
}

fn unit(v: &[i64]) -> Embedding {
    Embedding::normalized(v.iter().map(|&x| x as f64).collect()).unwrap()
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tie_instances = 0;
    for case in 0..1000 {
        let dim = rng.gen_range(2..=8);
        let query = random_direction(&mut rng, dim);
        // directions with pairwise distinct exact cosine; repeats make exact ties
        let mut pool: Vec<Vec<i64>> = Vec::new();
        let want = rng.gen_range(1..=40);
        for _ in 0..400 {
            if pool.len() == want {
                break;
            }
            let cand = random_direction(&mut rng, dim);
            if pool
                .iter()
                .all(|p| support::exact_cosine_cmp(&query, p, &cand) != std::cmp::Ordering::Equal)
            {
                pool.push(cand);
            }
        }
        let size = rng.gen_range(1..=200);
        let mut ids = BTreeSet::new();
        while ids.len() < size {
            ids.insert(format!("doc{}#{}", rng.gen_range(0..20), rng.gen_range(0..50)));
        }
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.shuffle(&mut rng);
        let entries: Vec<(String, Vec<i64>)> = ids
            .into_iter()
            .map(|id| (id, pool.choose(&mut rng).unwrap().clone()))
            .collect();

        let mut index = VectorIndex::new(dim);
        for (id, v) in &entries {
            let doc_id = id.split('#').next().unwrap().to_string();
            index
                .upsert(IndexEntry {
                    chunk_id: id.clone(),
                    doc_id,
                    embedding: unit(v),
                })
                .map_err(|e| e.to_string())?;
        }
        let k = rng.gen_range(0..=10);
        let hits = index.top_k(&unit(&query), k).map_err(|e| e.to_string())?;
        if hits.windows(2).any(|w| w[0].score == w[1].score) {
            tie_instances += 1;
        }
        let got: Vec<String> = hits.into_iter().map(|h| h.chunk_id).collect();
        let want = support::oracle_top_k(&query, &entries, k);
        ensure!(got == want, "case {case} (k={k}, n={size}): got {got:?}, oracle {want:?}");
    }
    ensure!(tie_instances >= 100, "only {tie_instances} instances exercised ties");
    Ok(())
}

fn chunker_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet: Vec<char> = "ab cdé中\nXY".chars().collect();
    for case in 0..1000 {
        let size = rng.gen_range(1..=300);
        let overlap = rng.gen_range(0..size);
        let len = rng.gen_range(0..=3000);
        let body: String = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
        let cfg = ChunkConfig::new(size, overlap).map_err(|e| e.to_string())?;
        let doc = Document {
            doc_id: "doc".into(),
            title: "doc".into(),
            body,
            source_path: "doc.txt".into(),
        };
        let chunks = chunk_document(&doc, &cfg);
        let spans: Vec<(usize, usize)> = chunks.iter().map(|c| c.char_span).collect();
        let enumerated = support::oracle_chunk_spans(len, size, overlap);
        let closed = expected_chunk_count(len, &cfg);
        ensure!(spans == enumerated, "case {case} ({len},{size},{overlap}): spans differ from enumeration");
        ensure!(chunks.len() == closed, "case {case}: {} chunks, closed form {closed}", chunks.len());
        if len > 0 {
            ensure!(spans[0].0 == 0 && spans.last().unwrap().1 == len, "case {case}: coverage gap at the ends");
        }
        for w in spans.windows(2) {
            ensure!(w[1].0 <= w[0].1, "case {case}: gap between {:?} and {:?}", w[0], w[1]);
            ensure!(w[0].1 - w[1].0 == overlap, "case {case}: overlap {} != {overlap}", w[0].1 - w[1].0);
        }
        for c in &chunks {
            let n = c.text.chars().count();
            ensure!(n == c.char_span.1 - c.char_span.0 && n <= size, "case {case}: chunk length {n}");
        }
    }
    Ok(())
}

fn answer(text: &str) -> Generation {
    Generation {
        text: text.into(),
        finish_reason: FinishReason::Stop,
        raw_text: text.into(),
    }
}

fn cache_semantics() -> Check {
    let embedder = LocalEmbedder::new(&EmbedderConfig::default()).map_err(|e| e.to_string())?;
    let emb = |q: &str| embedder.embed(q).unwrap();

    // exact-match strategy
    let mut cache = AnswerCache::new(CacheConfig::default()).map_err(|e| e.to_string())?;
    cache.store(CachedAnswer::new("What is hepatitis?", emb("What is hepatitis?"), answer("A"), vec![]));
    let table = [
        ("What is hepatitis?", true),
        ("what is hepatitis", true),
        ("WHAT IS HEPATITIS?!", true),
        ("  What   is\thepatitis ", true),
        ("What is hepatitis B?", false),
        ("What is hepatology?", false),
    ];
    for (q, hit) in table {
        let got = cache.lookup(q, Some(&emb(q))).is_some();
        ensure!(got == hit, "exact: {q:?} hit={got}, expected {hit}");
    }

    // distance strategy: hits grow monotonically with max_distance
    let stored = ["What is hepatitis?", "Explain glycolysis", "Causes of myocardial infarction"];
    let probes = [
        "what is hepatitis",
        "What is hepatitis B?",
        "explain glycolysis please",
        "glycolysis",
        "infarction causes",
        "renal tubular acidosis",
        "hepatitis",
    ];
    let thresholds = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0, 2.0];
    let mut previous: BTreeSet<&str> = BTreeSet::new();
    for t in thresholds {
        let cfg = CacheConfig {
            strategy: CacheStrategy::Distance,
            max_distance: t,
            ..CacheConfig::default()
        };
        let mut cache = AnswerCache::new(cfg).map_err(|e| e.to_string())?;
        for s in stored {
            cache.store(CachedAnswer::new(s, emb(s), answer(s), vec![]));
        }
        let hits: BTreeSet<&str> = probes.iter().copied().filter(|p| cache.lookup(p, Some(&emb(p))).is_some()).collect();
        ensure!(previous.is_subset(&hits), "distance: hits at {t} lost {:?}", previous.difference(&hits));
        previous = hits;
    }
    ensure!(previous.len() == probes.len(), "distance 2.0 should accept every probe");

    // LRU eviction order at capacity 3
    let cfg = CacheConfig {
        capacity: 3,
        ..CacheConfig::default()
    };
    let mut cache = AnswerCache::new(cfg).map_err(|e| e.to_string())?;
    enum Op {
        Store(&'static str),
        Get(&'static str),
    }
    let steps: [(Op, &[&str]); 7] = [
        (Op::Store("a"), &["a"]),
        (Op::Store("b"), &["a", "b"]),
        (Op::Store("c"), &["a", "b", "c"]),
        (Op::Get("a"), &["a", "b", "c"]),
        (Op::Store("d"), &["a", "c", "d"]),
        (Op::Get("c"), &["a", "c", "d"]),
        (Op::Store("e"), &["c", "d", "e"]),
    ];
    for (i, (op, expect)) in steps.iter().enumerate() {
        match op {
            Op::Store(k) => cache.store(CachedAnswer::new(k, emb(k), answer(k), vec![])),
            Op::Get(k) => {
                ensure!(cache.lookup(k, None).is_some(), "lru step {i}: {k} missing");
            }
        }
        let present: Vec<&str> = ["a", "b", "c", "d", "e"]
            .into_iter()
            .filter(|k| cache.contains(k))
            .collect();
        ensure!(present == *expect, "lru step {i}: present {present:?}, expected {expect:?}");
    }
    Ok(())
}

fn corpus_files() -> Vec<PathBuf> {
    ["biochemistry.md", "hepatology.md", "cardiology.txt"]
        .iter()
        .map(|f| fixtures().join("corpus").join(f))
        .collect()
}

fn medrag(dir: &Path, args: &[&str], stdin: Option<&str>) -> Result<(i32, String), String> {
    use std::io::Write;
    use std::process::Stdio;
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_medrag"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("MEDRAG_") {
            cmd.env_remove(k);
        }
    }
    let mut child = cmd
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut input = child.stdin.take().unwrap();
    if let Some(text) = stdin {
        input.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    }
    drop(input);
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    Ok((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned()))
}

const FAREWELL: &str = "Thank you for interacting with me today.
If I did not perform up to your expectations today, I apologize.
I am a work in progress, and I assure you I will keep improving myself
with each iteration.
You will find me a better assistant next time.
";

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = fixtures().join("corpus").display().to_string();
    let script = fixtures().join("mock_script.json").display().to_string();
    let (code, _) = medrag(dir.path(), &["ingest", &corpus], None)?;
    ensure!(code == 0, "ingest exited {code}");

    // top source by brute-force cosine over the fixture chunks
    let query = "What is the rate-limiting enzyme of glycolysis?";
    let embedder = LocalEmbedder::new(&EmbedderConfig::default()).map_err(|e| e.to_string())?;
    let q = embedder.embed(query).map_err(|e| e.to_string())?;
    let chunks = ingest_corpus(&corpus_files(), &ChunkConfig::default()).map_err(|e| e.to_string())?.chunks;
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let top = chunks
        .iter()
        .map(|c| (cos(q.as_slice(), embedder.embed(&c.text).unwrap().as_slice()), &c.chunk_id))
        .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(a.1)))
        .map(|(_, id)| id.clone())
        .ok_or("fixture corpus has no chunks")?;

    let scripted = "Phosphofructokinase-1 is the rate-limiting enzyme of glycolysis. It is activated by AMP and inhibited by ATP and citrate.";
    let mut first: Option<String> = None;
    for run in 0..10 {
        let (code, out) = medrag(dir.path(), &["--mock-script", &script, "ask", query], None)?;
        ensure!(code == 0, "ask run {run} exited {code}");
        ensure!(out.starts_with(&format!("{scripted}\n")), "ask run {run}: unexpected answer {out:?}");
        let first_source = out
            .split("Sources:\n")
            .nth(1)
            .and_then(|s| s.lines().next())
            .ok_or("no Sources: list")?;
        ensure!(first_source.starts_with(&format!("1. {top} ")), "top source {first_source:?}, oracle {top}");
        match &first {
            None => first = Some(out),
            Some(f) => ensure!(*f == out, "run {run} differs from run 0"),
        }
    }

    let (code, transcript) = medrag(
        dir.path(),
        &["--mock-script", &script, "chat"],
        Some("hi\nyes\nWhat is hepatitis?\nno\n"),
    )?;
    ensure!(code == 0, "chat exited {code}");
    ensure!(
        transcript.contains("Do you have another question? (yes/no): yes\nAsk your next question.\n"),
        "continue prompt missing: {transcript:?}"
    );
    ensure!(
        transcript.ends_with(&format!("Do you have another question? (yes/no): no\nBot: {FAREWELL}")),
        "farewell missing: {transcript:?}"
    );
    Ok(())
}

fn small_talk_bypass() -> Check {
    let mock = Arc::new(MockBackend::new());
    let embedder = Box::new(LocalEmbedder::new(&EmbedderConfig::default()).map_err(|e| e.to_string())?);
    let engine = Engine::builder(embedder, mock.clone()).build().map_err(|e| e.to_string())?;
    engine
        .ingest(&corpus_files(), &ChunkConfig::default())
        .map_err(|e| e.to_string())?;
    ensure!(engine.chunk_count() > 0, "corpus not ingested");
    let mut session = Session::new();
    for greeting in ["hi", "Hi!", "hello there", "good morning"] {
        let a = engine.next_turn(&mut session, greeting, &GenerationParams::default());
        ensure!(a.intent == Intent::Smalltalk, "{greeting:?} classified as {:?}", a.intent);
        ensure!(a.text.starts_with("Hello! How may I assist you today?"), "{greeting:?} got {:?}", a.text);
        ensure!(a.sources.is_empty(), "{greeting:?} returned sources");
    }
    let queries = engine.knowledge_base().index.query_count();
    ensure!(mock.calls() == 0, "backend called {} times", mock.calls());
    ensure!(queries == 0, "index queried {queries} times");
    ensure!(PersonaStrings::default().opening != "", "opening string empty");

    // the counters do move for a real question
    engine.next_turn(&mut session, "What is hepatitis?", &GenerationParams::default());
    ensure!(mock.calls() == 1, "question did not reach the backend");
    ensure!(engine.knowledge_base().index.query_count() == 1, "question did not query the index");
    Ok(())
}

fn mock_sampler() -> Check {
    let dist: BTreeMap<String, f64> = [("a", 0.5), ("b", 0.3), ("c", 0.2)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let set = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<BTreeSet<String>>();
    let at_07 = top_p_filter(&dist, 0.7);
    ensure!(at_07 == set(&["a", "b"]), "p=0.7 gave {at_07:?}");
    let at_1 = top_p_filter(&dist, 1.0);
    ensure!(at_1 == set(&["a", "b", "c"]), "p=1 gave {at_1:?}");

    let prompt = "User: describe the portal triad";
    let mut outputs = BTreeSet::new();
    for seed in 0..5 {
        let params = GenerationParams {
            temperature: 0.0,
            max_tokens: 60,
            seed,
            ..GenerationParams::default()
        };
        let g = generate(prompt, &params, &MockBackend::new()).map_err(|e| e.to_string())?;
        outputs.insert(g.raw_text);
    }
    ensure!(outputs.len() == 1, "temperature 0 produced {} distinct outputs", outputs.len());

    // and across processes
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = fixtures().join("corpus").display().to_string();
    medrag(dir.path(), &["ingest", &corpus], None)?;
    let args = ["--temperature", "0", "--max-tokens", "40", "ask", "Describe the portal triad"];
    let (c1, o1) = medrag(dir.path(), &args, None)?;
    let (c2, o2) = medrag(dir.path(), &args, None)?;
    ensure!(c1 == 0 && c2 == 0, "ask exited {c1}/{c2}");
    ensure!(o1 == o2, "outputs differ across processes");
    Ok(())
}
