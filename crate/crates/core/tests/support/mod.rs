//! Independent reference implementations and a scripted HTTP stub, shared by
//! the integration suites.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

/// Exact cosine comparison of two integer vectors against an integer query:
/// `q.a / |a|` vs `q.b / |b|` compared through squared, sign-aware integers.
pub fn exact_cosine_cmp(q: &[i64], a: &[i64], b: &[i64]) -> Ordering {
    let dot = |x: &[i64], y: &[i64]| x.iter().zip(y).map(|(p, r)| i128::from(*p) * i128::from(*r)).sum::<i128>();
    let (da, db) = (dot(q, a), dot(q, b));
    let (na, nb) = (dot(a, a), dot(b, b));
    // compare da*sqrt(nb) with db*sqrt(na)
    let lhs = da.signum() * da * da * nb;
    let rhs = db.signum() * db * db * na;
    lhs.cmp(&rhs)
}

/// Full sort by exact cosine descending, then id ascending; first `k` ids.
pub fn oracle_top_k(query: &[i64], entries: &[(String, Vec<i64>)], k: usize) -> Vec<String> {
    let mut sorted: Vec<&(String, Vec<i64>)> = entries.iter().collect();
    sorted.sort_by(|x, y| exact_cosine_cmp(query, &y.1, &x.1).then_with(|| x.0.cmp(&y.0)));
    sorted.into_iter().take(k).map(|e| e.0.clone()).collect()
}

/// Chunk start offsets by stepping a cursor, without the closed form.
pub fn oracle_chunk_spans(len: usize, size: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    if len == 0 {
        return spans;
    }
    let mut start = 0;
    loop {
        let end = usize::min(start + size, len);
        spans.push((start, end));
        if end >= len {
            return spans;
        }
        start += size - overlap;
    }
}

/// Unigram+bigram cosine computed with plain vectors of words.
pub fn oracle_similarity(candidate: &str, reference: &str) -> f64 {
    fn grams(text: &str) -> HashMap<String, f64> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        let mut m = HashMap::new();
        for w in &words {
            *m.entry(format!("1:{w}")).or_insert(0.0) += 1.0;
        }
        for pair in words.windows(2) {
            *m.entry(format!("2:{} {}", pair[0], pair[1])).or_insert(0.0) += 1.0;
        }
        m
    }
    let (c, r) = (grams(candidate), grams(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let dot: f64 = c.iter().filter_map(|(k, v)| r.get(k).map(|w| v * w)).sum();
    let norm = |m: &HashMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (norm(&c) * norm(&r))
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn json(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn slow(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// One-connection-at-a-time HTTP server answering with scripted replies in
/// order; the last reply repeats once the script runs out.
pub struct StubServer {
    pub addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

impl StubServer {
    pub fn start(script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let n = h.fetch_add(1, AtomicOrdering::SeqCst);
                let reply = script[n.min(script.len() - 1)].clone();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; content_length];
                let _ = reader.read_exact(&mut body);
                b.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
                thread::sleep(reply.delay);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    reply.status,
                    reply.body.len(),
                    reply.body
                );
            }
        });
        Self { addr, hits, bodies }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(AtomicOrdering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }
}

/// An address nothing listens on.
pub fn dead_url(path: &str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}{path}")
}
