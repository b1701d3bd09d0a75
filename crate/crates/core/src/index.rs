//! Exact cosine top-k search over chunk embeddings, with JSON-lines
//! persistence.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::embed::{Embedding, UNIT_NORM_TOLERANCE};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding for {chunk_id} is not unit length (norm {norm})")]
    NotUnit { chunk_id: String, norm: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub doc_id: String,
    #[serde(rename = "vector")]
    pub embedding: Embedding,
}

/// A scored hit before its text is resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub score: f64,
}

/// Orders by score descending, then chunk id ascending.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    version: u32,
}

/// Brute-force cosine index. Callers that share it across threads wrap it in
/// a `RwLock`; queries take `&self`.
#[derive(Debug)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    positions: HashMap<String, usize>,
    queries: AtomicUsize,
}

impl Clone for VectorIndex {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.clone(),
            positions: self.positions.clone(),
            queries: AtomicUsize::new(self.query_count()),
        }
    }
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            positions: HashMap::new(),
            queries: AtomicUsize::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.positions.contains_key(chunk_id)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Number of `top_k` calls served so far.
    pub fn query_count(&self) -> usize {
        self.queries.load(AtomicOrdering::Relaxed)
    }

    /// Inserts or replaces the entry stored under `entry.chunk_id`.
    pub fn upsert(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        let v = entry.embedding.as_slice();
        if v.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        let norm = crate::embed::l2_norm(v);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(IndexError::NotUnit {
                chunk_id: entry.chunk_id,
                norm,
            });
        }
        match self.positions.get(&entry.chunk_id) {
            Some(&pos) => self.entries[pos] = entry,
            None => {
                self.positions.insert(entry.chunk_id.clone(), self.entries.len());
                self.entries.push(entry);
            }
        }
        Ok(())
    }

    /// The `k` entries most similar to `query`, best first.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<ScoredChunk>, IndexError> {
        self.queries.fetch_add(1, AtomicOrdering::Relaxed);
        if k == 0 || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let q = query.as_slice();
        if q.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        let mut scored = self
            .entries
            .iter()
            .map(|e| {
                Ok(ScoredChunk {
                    chunk_id: e.chunk_id.clone(),
                    doc_id: e.doc_id.clone(),
                    score: cosine(q, e.embedding.as_slice())?,
                })
            })
            .collect::<Result<Vec<_>, IndexError>>()?;
        let cmp = |a: &ScoredChunk, b: &ScoredChunk| rank_order(a.score, &a.chunk_id, b.score, &b.chunk_id);
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored)
    }

    /// Writes a `{"dim","version"}` header line followed by one entry per line.
    pub fn persist(&self, path: &Path) -> Result<(), IndexError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        write_json_line(
            &mut out,
            &Header {
                dim: self.dim,
                version: FORMAT_VERSION,
            },
        )?;
        for entry in &self.entries {
            write_json_line(&mut out, entry)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => parse_line(&line?, 1)?,
            None => {
                return Err(IndexError::Corrupt {
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        };
        if header.version != FORMAT_VERSION {
            return Err(IndexError::Corrupt {
                line: 1,
                reason: format!("unsupported version {}", header.version),
            });
        }
        let mut index = Self::new(header.dim);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry = parse_line(&line, i + 1)?;
            index.upsert(entry).map_err(|e| IndexError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(index)
    }
}

fn write_json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), IndexError> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, line_no: usize) -> Result<T, IndexError> {
    serde_json::from_str(line).map_err(|e| IndexError::Corrupt {
        line: line_no,
        reason: e.to_string(),
    })
}

/// A hit with its chunk text attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub chunk_id: String,
    pub doc_id: String,
    pub score: f64,
    pub text: String,
}

/// Vector index plus the chunk texts it points at.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub index: VectorIndex,
    chunks: HashMap<String, Chunk>,
}

const INDEX_FILE: &str = "index.jsonl";
const CHUNKS_FILE: &str = "chunks.jsonl";

impl KnowledgeBase {
    pub fn new(dim: usize) -> Self {
        Self {
            index: VectorIndex::new(dim),
            chunks: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.chunks.get(chunk_id)
    }

    pub fn upsert(&mut self, chunk: Chunk, embedding: Embedding) -> Result<(), IndexError> {
        self.index.upsert(IndexEntry {
            chunk_id: chunk.chunk_id.clone(),
            doc_id: chunk.doc_id.clone(),
            embedding,
        })?;
        self.chunks.insert(chunk.chunk_id.clone(), chunk);
        Ok(())
    }

    pub fn retrieve(&self, query: &Embedding, k: usize) -> Result<Vec<RetrievedContext>, IndexError> {
        Ok(self
            .index
            .top_k(query, k)?
            .into_iter()
            .map(|hit| {
                let text = self
                    .chunks
                    .get(&hit.chunk_id)
                    .map(|c| c.text.clone())
                    .unwrap_or_default();
                RetrievedContext {
                    chunk_id: hit.chunk_id,
                    doc_id: hit.doc_id,
                    score: hit.score,
                    text,
                }
            })
            .collect())
    }

    /// Saves `index.jsonl` and `chunks.jsonl` under `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir)?;
        self.index.persist(&dir.join(INDEX_FILE))?;
        let mut out = BufWriter::new(File::create(dir.join(CHUNKS_FILE))?);
        let mut chunks: Vec<&Chunk> = self.chunks.values().collect();
        chunks.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        for chunk in chunks {
            write_json_line(&mut out, chunk)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let index = VectorIndex::load(&dir.join(INDEX_FILE))?;
        let mut chunks = HashMap::new();
        let reader = BufReader::new(File::open(dir.join(CHUNKS_FILE))?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let chunk: Chunk = parse_line(&line, i + 1)?;
            chunks.insert(chunk.chunk_id.clone(), chunk);
        }
        Ok(Self { index, chunks })
    }

    /// Loads from `dir` when it holds a saved index, otherwise starts empty.
    pub fn load_or_new(dir: &Path, dim: usize) -> Result<Self, IndexError> {
        if dir.join(INDEX_FILE).exists() {
            Self::load(dir)
        } else {
            Ok(Self::new(dim))
        }
    }
}
