//! Corpus ingestion: loading study documents, cleaning their text and
//! cutting them into fixed-size character chunks.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidEncoding { offset: usize },
    #[error("invalid chunk config: {0}")]
    InvalidConfig(String),
    #[error("every file failed to load ({} failures)", .0.len())]
    AllFailed(Vec<IngestFailure>),
}

/// A cleaned source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkConfig {
    /// Maximum chunk length in characters.
    pub chunk_size: usize,
    /// Characters shared by consecutive chunks; must be below `chunk_size`.
    pub chunk_overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_size: 1000,
            chunk_overlap: 0,
        }
    }
}

impl ChunkConfig {
    pub fn new(chunk_size: usize, chunk_overlap: usize) -> Result<Self, IngestError> {
        let cfg = Self {
            chunk_size,
            chunk_overlap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.chunk_size == 0 {
            return Err(IngestError::InvalidConfig("chunk_size must be positive".into()));
        }
        if self.chunk_overlap >= self.chunk_size {
            return Err(IngestError::InvalidConfig(format!(
                "chunk_overlap {} must be smaller than chunk_size {}",
                self.chunk_overlap, self.chunk_size
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.chunk_overlap
    }
}

/// One retrievable slice of a document. `char_span` is a half-open range of
/// character (not byte) offsets into the document body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub char_span: (usize, usize),
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}

/// Normalizes raw text: drops control characters other than newline, turns
/// tabs into spaces, collapses runs of spaces and caps blank-line runs at one
/// empty line. Idempotent.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut newline_run = 0usize;
    for c in raw.chars() {
        let c = if c == '\t' { ' ' } else { c };
        if c == '\n' {
            newline_run += 1;
            if newline_run <= 2 {
                out.push('\n');
            }
            continue;
        }
        if c.is_control() {
            continue;
        }
        if c == ' ' && out.ends_with(' ') {
            continue;
        }
        newline_run = 0;
        out.push(c);
    }
    out
}

/// Decodes UTF-8 bytes and cleans them.
pub fn clean_bytes(raw: &[u8]) -> Result<String, IngestError> {
    let text = std::str::from_utf8(raw).map_err(|e| IngestError::InvalidEncoding {
        offset: e.valid_up_to(),
    })?;
    Ok(clean_text(text))
}

/// Cuts `doc.body` into chunks of at most `chunk_size` characters advancing by
/// `chunk_size - chunk_overlap`. The last chunk ends at the end of the body.
pub fn chunk_document(doc: &Document, cfg: &ChunkConfig) -> Vec<Chunk> {
    // byte offset of every char boundary, including the end
    let bounds: Vec<usize> = doc
        .body
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(doc.body.len()))
        .collect();
    let len = bounds.len() - 1;
    if len == 0 {
        return Vec::new();
    }
    let stride = cfg.stride();
    let mut chunks = Vec::with_capacity(expected_chunk_count(len, cfg));
    let mut start = 0;
    loop {
        let end = (start + cfg.chunk_size).min(len);
        let ordinal = chunks.len();
        chunks.push(Chunk {
            chunk_id: chunk_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            text: doc.body[bounds[start]..bounds[end]].to_string(),
            char_span: (start, end),
        });
        if end == len {
            break;
        }
        start += stride;
    }
    chunks
}

/// Closed-form chunk count for a body of `len` characters.
pub fn expected_chunk_count(len: usize, cfg: &ChunkConfig) -> usize {
    if len == 0 {
        return 0;
    }
    1 + len.saturating_sub(cfg.chunk_size).div_ceil(cfg.stride())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestFailure {
    pub path: String,
    pub reason: String,
}

/// Summary emitted after an ingestion batch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks: usize,
    pub failures: Vec<IngestFailure>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestedCorpus {
    pub documents: Vec<Document>,
    pub chunks: Vec<Chunk>,
    pub failures: Vec<IngestFailure>,
}

impl IngestedCorpus {
    pub fn report(&self) -> IngestReport {
        IngestReport {
            documents: self.documents.len(),
            chunks: self.chunks.len(),
            failures: self.failures.clone(),
        }
    }
}

/// Loads and chunks every path. Per-file failures are collected; the batch
/// only fails when it was non-empty and nothing loaded.
pub fn ingest_corpus<P: AsRef<Path> + Sync>(
    paths: &[P],
    cfg: &ChunkConfig,
) -> Result<IngestedCorpus, IngestError> {
    cfg.validate()?;
    let loaded: Vec<Result<Document, IngestFailure>> =
        paths.par_iter().map(|p| load_document(p.as_ref())).collect();

    let mut corpus = IngestedCorpus::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for result in loaded {
        match result {
            Ok(mut doc) => {
                let n = seen.entry(doc.doc_id.clone()).or_insert(0);
                *n += 1;
                if *n > 1 {
                    doc.doc_id = format!("{}~{}", doc.doc_id, n);
                }
                corpus.documents.push(doc);
            }
            Err(failure) => {
                tracing::warn!(path = %failure.path, reason = %failure.reason, "skipping file");
                corpus.failures.push(failure);
            }
        }
    }
    corpus.chunks = corpus
        .documents
        .par_iter()
        .flat_map_iter(|doc| chunk_document(doc, cfg))
        .collect();

    if corpus.documents.is_empty() && !corpus.failures.is_empty() {
        return Err(IngestError::AllFailed(corpus.failures));
    }
    Ok(corpus)
}

/// Reads one `.txt` / `.md` file into a [`Document`].
pub fn load_document(path: &Path) -> Result<Document, IngestFailure> {
    let fail = |reason: String| IngestFailure {
        path: path.display().to_string(),
        reason,
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    if !matches!(ext.as_deref(), Some("txt" | "md" | "markdown")) {
        return Err(fail("unsupported file type (expected .txt or .md)".into()));
    }
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    let body = clean_bytes(&bytes).map_err(|e| fail(e.to_string()))?;
    let doc_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .unwrap_or("doc")
        .to_string();
    let title = body
        .lines()
        .map(|l| l.trim_start_matches('#').trim())
        .find(|l| !l.is_empty())
        .unwrap_or(&doc_id)
        .to_string();
    Ok(Document {
        doc_id,
        title,
        body,
        source_path: PathBuf::from(path).display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(body: &str) -> Document {
        Document {
            doc_id: "d".into(),
            title: "t".into(),
            body: body.into(),
            source_path: "d.txt".into(),
        }
    }

    fn spans(len: usize, size: usize, overlap: usize) -> Vec<(usize, usize)> {
        let cfg = ChunkConfig::new(size, overlap).unwrap();
        chunk_document(&doc(&"x".repeat(len)), &cfg)
            .into_iter()
            .map(|c| c.char_span)
            .collect()
    }

    #[test]
    fn clean_collapses_whitespace() {
        assert_eq!(clean_text("a  b\t c"), "a b c");
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("a\r\nb\u{7}c"), "a\nbc");
        assert_eq!(clean_text("a\n\n\n\n\nb"), "a\n\nb");
        assert_eq!(clean_text("a\n\nb"), "a\n\nb");
    }

    #[test]
    fn invalid_utf8_names_offset() {
        let err = clean_bytes(b"abc\xffdef").unwrap_err();
        assert_eq!(err, IngestError::InvalidEncoding { offset: 3 });
    }

    #[test]
    fn stride_examples() {
        assert_eq!(spans(2500, 1000, 0), vec![(0, 1000), (1000, 2000), (2000, 2500)]);
        assert_eq!(spans(2500, 1000, 200), vec![(0, 1000), (800, 1800), (1600, 2500)]);
        assert_eq!(spans(400, 1000, 0), vec![(0, 400)]);
        assert!(spans(0, 1000, 0).is_empty());
    }

    #[test]
    fn chunks_use_character_offsets() {
        let d = doc("ééééé");
        let chunks = chunk_document(&d, &ChunkConfig::new(2, 0).unwrap());
        let texts: Vec<_> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["éé", "éé", "é"]);
        assert_eq!(chunks[2].chunk_id, "d#2");
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(ChunkConfig::new(0, 0).is_err());
        assert!(ChunkConfig::new(10, 10).is_err());
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(s in "[a-c \t\n\r\u{0}\u{1b}é]{0,60}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn chunks_reconstruct_body(body in "[a-zé ]{0,300}", size in 1usize..50, overlap_frac in 0.0f64..1.0) {
            let overlap = ((size as f64) * overlap_frac) as usize;
            let overlap = overlap.min(size - 1);
            let cfg = ChunkConfig::new(size, overlap).unwrap();
            let chunks = chunk_document(&doc(&body), &cfg);
            let mut rebuilt = String::new();
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.ordinal, i);
                let skip = if i == 0 { 0 } else { overlap };
                rebuilt.extend(c.text.chars().skip(skip));
            }
            prop_assert_eq!(rebuilt, body);
        }
    }
}
