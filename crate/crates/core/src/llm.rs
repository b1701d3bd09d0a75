//! Generation backends and output postprocessing.
//!
//! Two backends implement [`LlmBackend`]: [`HttpBackend`] talks to any
//! chat-completions endpoint, [`MockBackend`] answers from a script or from a
//! seeded sampler over a small vocabulary so that tests run offline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::tokenize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("generation request failed after {attempts} attempt(s): {message}")]
    Retriable { attempts: u32, message: String },
    #[error("backend returned {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("backend config error: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retriable(&self) -> bool {
        match self {
            LlmError::Retriable { .. } => true,
            LlmError::Backend { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    /// Keep only this many sentences of the reply; `None` keeps everything.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sentences: Option<usize>,
    /// Sampler seed (mock backend only).
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            top_p: 0.9,
            max_tokens: 1500,
            stop: vec!["</s>".into()],
            max_sentences: None,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidParams(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidParams(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be at least 1".into()));
        }
        if self.max_sentences == Some(0) {
            return Err(LlmError::InvalidParams("max_sentences must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub finish_reason: FinishReason,
    pub raw_text: String,
}

/// Unprocessed backend output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub finish_reason: FinishReason,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<RawCompletion, LlmError>;
}

/// Runs one generation and postprocesses it: cut at the first stop marker,
/// then keep at most `max_sentences` sentences.
pub fn generate(prompt: &str, params: &GenerationParams, backend: &dyn LlmBackend) -> Result<Generation, LlmError> {
    params.validate()?;
    let raw = backend.complete(prompt, params)?;
    let cut = truncate_at_stop(&raw.text, &params.stop);
    let finish_reason = if cut.len() < raw.text.len() {
        FinishReason::Stop
    } else {
        raw.finish_reason
    };
    let text = truncate_sentences(cut, params.max_sentences).trim_end().to_string();
    Ok(Generation {
        text,
        finish_reason,
        raw_text: raw.text,
    })
}

/// Text before the earliest occurrence of any stop marker.
pub fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// Keeps the first `max_sentences` sentences. A sentence ends at `.`, `!` or
/// `?` followed by whitespace or the end of text; a period between two digits
/// is a decimal point, not a boundary.
pub fn truncate_sentences(text: &str, max_sentences: Option<usize>) -> &str {
    let Some(limit) = max_sentences else {
        return text;
    };
    if limit == 0 {
        return "";
    }
    let mut seen = 0;
    let mut prev: Option<char> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let next = chars.peek().map(|&(_, n)| n);
        let decimal = c == '.'
            && prev.is_some_and(|p| p.is_ascii_digit())
            && next.is_some_and(|n| n.is_ascii_digit());
        if matches!(c, '.' | '!' | '?') && !decimal && next.is_none_or(char::is_whitespace) {
            seen += 1;
            if seen == limit {
                return &text[..i + c.len_utf8()];
            }
        }
        prev = Some(c);
    }
    text
}

/// Sorts by probability descending, ties by token ascending.
fn by_mass_then_token(a: &(&str, f64), b: &(&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Slack allowed on the cumulative mass, matching the tolerance on the input
/// distribution summing to one.
const MASS_EPSILON: f64 = 1e-9;

fn nucleus<'a>(dist: &[(&'a str, f64)], p: f64) -> Vec<(&'a str, f64)> {
    let mut sorted = dist.to_vec();
    sorted.sort_by(by_mass_then_token);
    let mut cumulative = 0.0;
    for (i, &(_, prob)) in sorted.iter().enumerate() {
        cumulative += prob;
        if cumulative >= p - MASS_EPSILON {
            sorted.truncate(i + 1);
            break;
        }
    }
    sorted
}

/// Smallest set of most-probable tokens whose cumulative probability reaches `p`.
pub fn top_p_filter(dist: &BTreeMap<String, f64>, p: f64) -> BTreeSet<String> {
    let pairs: Vec<(&str, f64)> = dist.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    nucleus(&pairs, p).into_iter().map(|(t, _)| t.to_string()).collect()
}

/// Softmax of `logits / temperature`. Temperature zero puts all mass on the
/// argmax (lowest token on ties).
pub fn apply_temperature<'a>(logits: &[(&'a str, f64)], temperature: f64) -> Vec<(&'a str, f64)> {
    if temperature == 0.0 {
        let best = logits.iter().copied().min_by(by_mass_then_token).map(|(t, _)| t);
        return logits
            .iter()
            .map(|&(t, _)| (t, if Some(t) == best { 1.0 } else { 0.0 }))
            .collect();
    }
    let max = logits.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&(_, l)| ((l - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    logits.iter().zip(exps).map(|(&(t, _), e)| (t, e / total)).collect()
}

/// Tokens the sampler may draw from after temperature scaling and nucleus
/// filtering.
pub fn candidate_set<'a>(logits: &[(&'a str, f64)], temperature: f64, top_p: f64) -> Vec<&'a str> {
    nucleus(&apply_temperature(logits, temperature), top_p)
        .into_iter()
        .map(|(t, _)| t)
        .collect()
}

const MOCK_VOCAB: &[&str] = &[
    "the", "liver", "cell", "virus", "immune", "gene", "response", "is", "a", "of", "and", "chronic",
    "inflammation", "infection", "causes", ".", "</s>",
];

/// A scripted reply. `prompt` rules match the full prompt exactly; `query`
/// rules match the final `User:` turn after normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub reply: String,
}

/// Offline backend: scripted replies first, otherwise a seeded sampler.
#[derive(Debug, Default)]
pub struct MockBackend {
    by_prompt: HashMap<String, String>,
    by_query: HashMap<String, String>,
    failure: Option<LlmError>,
    calls: AtomicUsize,
    last_prompt: Mutex<Option<String>>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rules(rules: impl IntoIterator<Item = ScriptRule>) -> Self {
        let mut mock = Self::new();
        for rule in rules {
            if let Some(p) = rule.prompt {
                mock.by_prompt.insert(p, rule.reply.clone());
            }
            if let Some(q) = rule.query {
                mock.by_query.insert(normalize_query(&q), rule.reply);
            }
        }
        mock
    }

    /// Reads a JSON array of [`ScriptRule`]s.
    pub fn from_script_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read mock script {}: {e}", path.display())))?;
        let rules: Vec<ScriptRule> = serde_json::from_str(&text)
            .map_err(|e| LlmError::Config(format!("invalid mock script {}: {e}", path.display())))?;
        Ok(Self::with_rules(rules))
    }

    pub fn script_prompt(mut self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.by_prompt.insert(prompt.into(), reply.into());
        self
    }

    pub fn script_query(mut self, query: &str, reply: impl Into<String>) -> Self {
        self.by_query.insert(normalize_query(query), reply.into());
        self
    }

    /// Every call fails with `err`.
    pub fn failing(err: LlmError) -> Self {
        Self {
            failure: Some(err),
            ..Self::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(AtomicOrdering::SeqCst)
    }

    pub fn last_prompt(&self) -> Option<String> {
        self.last_prompt.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn sample(&self, prompt: &str, params: &GenerationParams) -> RawCompletion {
        let prompt_hash = fnv(prompt.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ prompt_hash);
        let mut words: Vec<&str> = Vec::new();
        let mut prev = MOCK_VOCAB.len();
        for step in 0..params.max_tokens {
            let logits: Vec<(&str, f64)> = MOCK_VOCAB
                .iter()
                .enumerate()
                .map(|(j, &t)| (t, mock_logit(prompt_hash, step, prev, j)))
                .collect();
            let probs = apply_temperature(&logits, params.temperature);
            let pool = nucleus(&probs, params.top_p);
            let mass: f64 = pool.iter().map(|&(_, p)| p).sum();
            let mut draw = rng.gen_range(0.0..1.0) * mass;
            let mut choice = pool[pool.len() - 1].0;
            for &(t, p) in &pool {
                if draw < p {
                    choice = t;
                    break;
                }
                draw -= p;
            }
            words.push(choice);
            if choice == "</s>" {
                break;
            }
            prev = MOCK_VOCAB.iter().position(|&t| t == choice).unwrap_or(0);
        }
        let finish_reason = if words.last() == Some(&"</s>") {
            FinishReason::Stop
        } else {
            FinishReason::Length
        };
        let mut text = String::new();
        for w in words {
            if !text.is_empty() && w != "." && w != "</s>" {
                text.push(' ');
            }
            text.push_str(w);
        }
        RawCompletion { text, finish_reason }
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Pseudo-random logit in [-2, 2) determined by context.
fn mock_logit(prompt_hash: u64, step: u32, prev: usize, token: usize) -> f64 {
    let mut x = prompt_hash ^ (u64::from(step) << 32) ^ ((prev as u64) << 16) ^ token as u64;
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
}

fn normalize_query(q: &str) -> String {
    tokenize(q).join(" ")
}

/// The text after the last `User: ` marker of a rendered prompt.
fn final_user_turn(prompt: &str) -> Option<&str> {
    prompt.rfind("User: ").map(|i| &prompt[i + "User: ".len()..])
}

impl LlmBackend for MockBackend {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<RawCompletion, LlmError> {
        self.calls.fetch_add(1, AtomicOrdering::SeqCst);
        *self.last_prompt.lock().unwrap_or_else(|e| e.into_inner()) = Some(prompt.to_string());
        if let Some(err) = &self.failure {
            return Err(err.clone());
        }
        let scripted = self.by_prompt.get(prompt).or_else(|| {
            final_user_turn(prompt).and_then(|q| self.by_query.get(&normalize_query(q)))
        });
        if let Some(reply) = scripted {
            return Ok(RawCompletion {
                text: reply.clone(),
                finish_reason: FinishReason::Stop,
            });
        }
        Ok(self.sample(prompt, params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: LlmBackendKind,
    pub url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub model: String,
    pub retries: u32,
    pub timeout_secs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: LlmBackendKind::Mock,
            url: "http://127.0.0.1:8080/v1/chat/completions".into(),
            key: None,
            model: "mistral-7b-instruct-v0.2".into(),
            retries: 2,
            timeout_secs: 120,
            mock_script: None,
        }
    }
}

pub fn build_backend(cfg: &LlmConfig) -> Result<Box<dyn LlmBackend>, LlmError> {
    Ok(match cfg.backend {
        LlmBackendKind::Mock => match &cfg.mock_script {
            Some(path) => Box::new(MockBackend::from_script_file(Path::new(path))?),
            None => Box::new(MockBackend::new()),
        },
        LlmBackendKind::Remote => Box::new(HttpBackend::new(cfg)),
    })
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completions client with bounded retries on transport errors and
/// 5xx/429 responses.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    key: Option<String>,
    model: String,
    retries: u32,
}

enum Attempt {
    Retry(String, Option<LlmError>),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(cfg: &LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            url: cfg.url.clone(),
            key: cfg.key.clone(),
            model: cfg.model.clone(),
            retries: cfg.retries,
        }
    }

    fn attempt(&self, prompt: &str, params: &GenerationParams) -> Result<RawCompletion, Attempt> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            stop: &params.stop,
        };
        let mut resp = req.send_json(&body).map_err(|e| Attempt::Retry(e.to_string(), None))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string(), None))?;
        if !(200..300).contains(&status) {
            let err = LlmError::Backend { status, body: text };
            return Err(if err.is_retriable() {
                Attempt::Retry(format!("status {status}"), Some(err))
            } else {
                Attempt::Fatal(err)
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(LlmError::Backend {
                status,
                body: format!("malformed response ({e}): {text}"),
            })
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            Attempt::Fatal(LlmError::Backend {
                status,
                body: "response contained no choices".into(),
            })
        })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(RawCompletion {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
        })
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<RawCompletion, LlmError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(prompt, params) {
                Ok(raw) => return Ok(raw),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message, last)) => {
                    if attempts > self.retries {
                        return Err(last.unwrap_or(LlmError::Retriable { attempts, message }));
                    }
                    tracing::debug!(attempts, %message, "retrying generation request");
                    std::thread::sleep(Duration::from_millis(100 * u64::from(attempts)));
                }
            }
        }
    }
}
