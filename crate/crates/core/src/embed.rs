//! Text embeddings: tokenization, a deterministic hashed character n-gram
//! embedder, a remote HTTP embedder and sparse term counts.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the L2 norm of a stored embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text contains no tokens to embed")]
    ZeroText,
    #[error("embedding request failed after {attempts} attempt(s): {message}")]
    Retriable { attempts: u32, message: String },
    #[error("embedding config error: {0}")]
    Config(String),
    #[error("embedding endpoint returned {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("invalid vector: {0}")]
    InvalidVector(String),
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Retriable { .. })
    }
}

/// A unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Scales `raw` to unit length.
    pub fn normalized(mut raw: Vec<f64>) -> Result<Self, EmbedError> {
        if raw.is_empty() {
            return Err(EmbedError::InvalidVector("empty vector".into()));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::InvalidVector("non-finite component".into()));
        }
        let norm = l2_norm(&raw);
        if norm == 0.0 {
            return Err(EmbedError::InvalidVector("zero vector".into()));
        }
        raw.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(raw))
    }

    /// Wraps a vector that is already unit length.
    pub fn from_unit(raw: Vec<f64>) -> Result<Self, EmbedError> {
        if raw.is_empty() || raw.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::InvalidVector("empty or non-finite vector".into()));
        }
        let norm = l2_norm(&raw);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbedError::InvalidVector(format!("norm {norm} is not 1")));
        }
        Ok(Self(raw))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbedError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_unit(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedBackend {
    #[default]
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub backend: EmbedBackend,
    pub dim: usize,
    /// Character n-gram length for the local backend.
    pub ngram_n: usize,
    pub remote_endpoint: String,
    pub remote_model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_key: Option<String>,
    pub max_in_flight: usize,
    pub retries: u32,
    pub timeout_secs: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: EmbedBackend::Local,
            dim: 384,
            ngram_n: 3,
            remote_endpoint: "http://127.0.0.1:8081/v1/embeddings".into(),
            remote_model: "text-embedding".into(),
            remote_key: None,
            max_in_flight: 4,
            retries: 2,
            timeout_secs: 30,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 8 {
            return Err(EmbedError::Config(format!("dim must be at least 8, got {}", self.dim)));
        }
        if self.ngram_n == 0 {
            return Err(EmbedError::Config("ngram_n must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(EmbedError::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that turns text into an [`Embedding`].
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;

    /// Output dimension, if known yet.
    fn dim(&self) -> Option<usize>;
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Term-count representation of a text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseVector {
    pub entries: BTreeMap<String, u32>,
}

impl SparseVector {
    pub fn total(&self) -> u64 {
        self.entries.values().map(|&c| u64::from(c)).sum()
    }
}

pub fn sparse_embed(text: &str) -> SparseVector {
    let mut entries = BTreeMap::new();
    for token in tokenize(text) {
        *entries.entry(token).or_insert(0) += 1;
    }
    SparseVector { entries }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const BUCKET_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const SIGN_SEED: u64 = 0x84222325_cbf29ce4;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(seed, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Signed feature hashing of character n-grams over the normalized token
/// stream. Pure function of `(text, dim, ngram_n)`.
#[derive(Debug, Clone)]
pub struct LocalEmbedder {
    dim: usize,
    ngram_n: usize,
}

impl LocalEmbedder {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        Ok(Self {
            dim: cfg.dim,
            ngram_n: cfg.ngram_n,
        })
    }

    pub fn hashed_counts(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::ZeroText);
        }
        let joined: Vec<char> = tokens.join(" ").chars().collect();
        let n = self.ngram_n.min(joined.len());
        let mut counts = vec![0.0; self.dim];
        let mut buf = String::new();
        for gram in joined.windows(n) {
            buf.clear();
            buf.extend(gram);
            let bucket = (fnv1a(BUCKET_SEED, buf.as_bytes()) % self.dim as u64) as usize;
            let sign = if fnv1a(SIGN_SEED, buf.as_bytes()) & 1 == 0 { 1.0 } else { -1.0 };
            counts[bucket] += sign;
        }
        Ok(counts)
    }
}

impl Embedder for LocalEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let counts = self.hashed_counts(text)?;
        // signed collisions can cancel every bucket; fall back to unsigned
        if counts.iter().all(|&x| x == 0.0) {
            let abs: Vec<f64> = self.unsigned_counts(text);
            return Embedding::normalized(abs);
        }
        Embedding::normalized(counts)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
}

impl LocalEmbedder {
    fn unsigned_counts(&self, text: &str) -> Vec<f64> {
        let joined: Vec<char> = tokenize(text).join(" ").chars().collect();
        let n = self.ngram_n.min(joined.len());
        let mut counts = vec![0.0; self.dim];
        for gram in joined.windows(n) {
            let s: String = gram.iter().collect();
            counts[(fnv1a(BUCKET_SEED, s.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        counts
    }
}

/// Bounds the number of concurrent requests.
#[derive(Debug)]
struct InFlightLimit {
    active: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl InFlightLimit {
    fn new(max: usize) -> Self {
        Self {
            active: Mutex::new(0),
            freed: Condvar::new(),
            max,
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlightLimit);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Client for a hosted embeddings endpoint speaking
/// `{"model","input"}` -> `{"data":[{"embedding":[...]}]}`.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    key: Option<String>,
    retries: u32,
    dim: OnceLock<usize>,
    limit: InFlightLimit,
}

impl RemoteEmbedder {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: cfg.remote_endpoint.clone(),
            model: cfg.remote_model.clone(),
            key: cfg.remote_key.clone(),
            retries: cfg.retries,
            dim: OnceLock::new(),
            limit: InFlightLimit::new(cfg.max_in_flight),
        })
    }

    fn request_once(&self, text: &str) -> Result<Vec<f64>, AttemptError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EmbedRequest {
                model: &self.model,
                input: text,
            })
            .map_err(|e| AttemptError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Transport(e.to_string()))?;
        if status >= 500 || status == 429 {
            return Err(AttemptError::Transport(format!("status {status}: {body}")));
        }
        if !(200..300).contains(&status) {
            return Err(AttemptError::Fatal(EmbedError::Backend { status, body }));
        }
        let parsed: EmbedResponse = serde_json::from_str(&body).map_err(|e| {
            AttemptError::Fatal(EmbedError::Backend {
                status,
                body: format!("malformed response ({e}): {body}"),
            })
        })?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| {
                AttemptError::Fatal(EmbedError::Backend {
                    status,
                    body: "response contained no embedding".into(),
                })
            })
    }
}

enum AttemptError {
    Transport(String),
    Fatal(EmbedError),
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if tokenize(text).is_empty() {
            return Err(EmbedError::ZeroText);
        }
        let _slot = self.limit.acquire();
        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            match self.request_once(text) {
                Ok(v) => break v,
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transport(message)) => {
                    if attempts > self.retries {
                        return Err(EmbedError::Retriable { attempts, message });
                    }
                    tracing::debug!(attempts, %message, "retrying embedding request");
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempts)));
                }
            }
        };
        let recorded = *self.dim.get_or_init(|| raw.len());
        if raw.len() != recorded {
            return Err(EmbedError::Config(format!(
                "endpoint returned dimension {} but {} was recorded",
                raw.len(),
                recorded
            )));
        }
        Embedding::normalized(raw)
    }

    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    Ok(match cfg.backend {
        EmbedBackend::Local => Box::new(LocalEmbedder::new(cfg)?),
        EmbedBackend::Remote => Box::new(RemoteEmbedder::new(cfg)?),
    })
}
