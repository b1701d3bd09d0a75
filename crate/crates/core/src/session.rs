//! Conversation state, intent routing, keyword extraction and query expansion.

use std::collections::HashSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::tokenize;
use crate::index::RetrievedContext;

const DEFAULT_INTENTS: &str = include_str!("../data/intents.json");
const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");
const DEFAULT_STRINGS: &str = include_str!("../data/strings.json");

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid intents file: {0}")]
    Intents(String),
    #[error("invalid strings file: {0}")]
    Strings(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Smalltalk,
    Farewell,
    Question,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentRule {
    pub intent: Intent,
    pub patterns: Vec<String>,
    #[serde(rename = "reply", default, skip_serializing_if = "Option::is_none")]
    pub canned_reply: Option<String>,
}

/// Pattern rules routing greetings and farewells to canned replies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentRules {
    rules: Vec<IntentRule>,
}

impl Default for IntentRules {
    fn default() -> Self {
        Self::from_json(DEFAULT_INTENTS).expect("bundled intents file is valid")
    }
}

impl IntentRules {
    pub fn new(rules: Vec<IntentRule>) -> Result<Self, SessionError> {
        for rule in &rules {
            match (rule.intent, &rule.canned_reply) {
                (Intent::Question, Some(_)) => {
                    return Err(SessionError::Intents("question rules carry no reply".into()))
                }
                (Intent::Smalltalk | Intent::Farewell, None) => {
                    return Err(SessionError::Intents(format!("{:?} rule needs a reply", rule.intent)))
                }
                _ => {}
            }
        }
        Ok(Self { rules })
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let rules: Vec<IntentRule> = serde_json::from_str(text).map_err(|e| SessionError::Intents(e.to_string()))?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        Self::from_json(&read(path)?)
    }

    pub fn rules(&self) -> &[IntentRule] {
        &self.rules
    }

    /// The first smalltalk/farewell rule whose pattern equals the normalized
    /// query.
    pub fn matching(&self, query: &str) -> Option<&IntentRule> {
        let normalized = tokenize(query).join(" ");
        if normalized.is_empty() {
            return None;
        }
        self.rules.iter().filter(|r| r.intent != Intent::Question).find(|r| {
            r.patterns
                .iter()
                .any(|p| tokenize(p).join(" ") == normalized)
        })
    }

    /// Reply attached to the first rule of the given intent.
    pub fn reply_for(&self, intent: Intent) -> Option<&str> {
        self.rules
            .iter()
            .find(|r| r.intent == intent)
            .and_then(|r| r.canned_reply.as_deref())
    }
}

pub fn classify_intent(query: &str, rules: &IntentRules) -> Intent {
    rules.matching(query).map_or(Intent::Question, |r| r.intent)
}

fn read(path: &Path) -> Result<String, SessionError> {
    std::fs::read_to_string(path).map_err(|e| SessionError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

impl Stopwords {
    /// One word per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        Ok(Self::parse(&read(path)?))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub text: String,
    pub weight: f64,
}

/// Non-stopword tokens of the query, lowercased. Runs of adjacent capitalized
/// tokens become one phrase ("Megan Fox" -> "megan fox"). Weight is the
/// number of occurrences in the query.
pub fn extract_keywords(query: &str, stopwords: &Stopwords) -> Vec<Keyword> {
    let mut found: Vec<String> = Vec::new();
    let mut phrase: Vec<String> = Vec::new();
    let flush = |phrase: &mut Vec<String>, found: &mut Vec<String>| {
        if !phrase.is_empty() {
            found.push(phrase.join(" "));
            phrase.clear();
        }
    };
    for raw in query.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let lower = raw.to_lowercase();
        if stopwords.contains(&lower) {
            flush(&mut phrase, &mut found);
            continue;
        }
        if raw.chars().next().is_some_and(char::is_uppercase) {
            phrase.push(lower);
        } else {
            flush(&mut phrase, &mut found);
            found.push(lower);
        }
    }
    flush(&mut phrase, &mut found);

    let mut keywords: Vec<Keyword> = Vec::new();
    for text in found {
        match keywords.iter_mut().find(|k| k.text == text) {
            Some(k) => k.weight += 1.0,
            None => keywords.push(Keyword { text, weight: 1.0 }),
        }
    }
    keywords
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    pub answer: String,
    pub intent: Intent,
    pub sources: Vec<RetrievedContext>,
    pub cached: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
    pub at: DateTime<Utc>,
}

impl Turn {
    pub fn source_ids(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.chunk_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
    pub created_at: DateTime<Utc>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Self::with_id(uuid::Uuid::new_v4().to_string())
    }

    pub fn with_id(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            turns: Vec::new(),
            created_at: Utc::now(),
        }
    }

    pub fn push(&mut self, turn: Turn) {
        self.turns.push(turn);
    }
}

/// Appends keywords from the last `window` question turns that the query does
/// not already mention. Used for retrieval only; the prompt keeps the raw
/// query.
pub fn expand_query(query: &str, session: &Session, window: usize, stopwords: &Stopwords) -> String {
    if window == 0 {
        return query.to_string();
    }
    let mut present: HashSet<String> = tokenize(query).into_iter().collect();
    let mut extra: Vec<String> = Vec::new();
    let recent = session
        .turns
        .iter()
        .rev()
        .filter(|t| t.intent == Intent::Question)
        .take(window);
    for turn in recent {
        for kw in extract_keywords(&turn.query, stopwords) {
            let tokens = tokenize(&kw.text);
            if tokens.iter().all(|t| present.contains(t)) {
                continue;
            }
            present.extend(tokens);
            extra.push(kw.text);
        }
    }
    if extra.is_empty() {
        query.to_string()
    } else {
        format!("{query} {}", extra.join(" "))
    }
}

/// User-facing text for the REPL and for non-generated answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaStrings {
    pub opening: String,
    pub continue_prompt: String,
    pub next_question: String,
    pub empty_corpus: String,
    pub no_terms: String,
    pub backend_failure: String,
}

impl Default for PersonaStrings {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_STRINGS).expect("bundled strings file is valid")
    }
}

impl PersonaStrings {
    pub fn load(path: &Path) -> Result<Self, SessionError> {
        serde_json::from_str(&read(path)?).map_err(|e| SessionError::Strings(e.to_string()))
    }
}
