//! Answer cache keyed by normalized query text or by embedding proximity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{tokenize, Embedding};
use crate::index::{cosine, RetrievedContext};
use crate::llm::Generation;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("invalid cache config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt cache file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CacheStrategy {
    #[default]
    Exact,
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub strategy: CacheStrategy,
    /// Largest cosine distance (`1 - cosine`) that still counts as a hit.
    pub max_distance: f64,
    pub capacity: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            strategy: CacheStrategy::Exact,
            max_distance: 0.1,
            capacity: 1024,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        if !(0.0..=2.0).contains(&self.max_distance) {
            return Err(CacheError::Config(format!(
                "max_distance must be in [0, 2], got {}",
                self.max_distance
            )));
        }
        if self.capacity == 0 {
            return Err(CacheError::Config("capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedAnswer {
    pub query_text: String,
    pub query_embedding: Embedding,
    pub answer: Generation,
    #[serde(default)]
    pub sources: Vec<RetrievedContext>,
    pub stored_at: DateTime<Utc>,
}

impl CachedAnswer {
    pub fn new(query: &str, query_embedding: Embedding, answer: Generation, sources: Vec<RetrievedContext>) -> Self {
        Self {
            query_text: normalize(query),
            query_embedding,
            answer,
            sources,
            stored_at: Utc::now(),
        }
    }
}

/// Lowercased, punctuation-insensitive form used as the exact-match key.
pub fn normalize(query: &str) -> String {
    tokenize(query).join(" ")
}

#[derive(Debug)]
struct Slot {
    entry: CachedAnswer,
    last_used: AtomicU64,
}

/// LRU-bounded answer cache. Lookups take `&self` (recency is tracked with
/// atomics) so they can run concurrently under a read lock.
#[derive(Debug)]
pub struct AnswerCache {
    cfg: CacheConfig,
    slots: HashMap<String, Slot>,
    clock: AtomicU64,
}

impl AnswerCache {
    pub fn new(cfg: CacheConfig) -> Result<Self, CacheError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            slots: HashMap::new(),
            clock: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Membership by normalized query; does not touch recency.
    pub fn contains(&self, query_text: &str) -> bool {
        self.slots.contains_key(&normalize(query_text))
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn lookup(&self, query_text: &str, query_embedding: Option<&Embedding>) -> Option<CachedAnswer> {
        self.lookup_as(query_text, query_embedding, &self.cfg)
    }

    /// Lookup under another strategy/threshold than the configured one.
    /// Capacity is still governed by the cache's own config.
    pub fn lookup_as(&self, query_text: &str, query_embedding: Option<&Embedding>, cfg: &CacheConfig) -> Option<CachedAnswer> {
        let slot = match cfg.strategy {
            CacheStrategy::Exact => self.slots.get(&normalize(query_text)),
            CacheStrategy::Distance => {
                let q = query_embedding?;
                self.slots
                    .iter()
                    .filter_map(|(key, slot)| {
                        let sim = cosine(q.as_slice(), slot.entry.query_embedding.as_slice()).ok()?;
                        Some((1.0 - sim, key, slot))
                    })
                    .filter(|(d, _, _)| *d <= cfg.max_distance)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
                    .map(|(_, _, slot)| slot)
            }
        }?;
        slot.last_used.store(self.tick(), Ordering::Relaxed);
        Some(slot.entry.clone())
    }

    /// Inserts or replaces the entry for its normalized query, evicting the
    /// least recently used entry when full.
    pub fn store(&mut self, entry: CachedAnswer) {
        let key = entry.query_text.clone();
        let stamp = self.tick();
        if !self.slots.contains_key(&key) && self.slots.len() >= self.cfg.capacity {
            let victim = self
                .slots
                .iter()
                .min_by_key(|(_, s)| s.last_used.load(Ordering::Relaxed))
                .map(|(k, _)| k.clone());
            if let Some(victim) = victim {
                self.slots.remove(&victim);
            }
        }
        self.slots.insert(
            key,
            Slot {
                entry,
                last_used: AtomicU64::new(stamp),
            },
        );
    }

    /// Writes entries oldest-use first so that reloading preserves LRU order.
    pub fn persist(&self, path: &Path) -> Result<(), CacheError> {
        let mut slots: Vec<&Slot> = self.slots.values().collect();
        slots.sort_by_key(|s| s.last_used.load(Ordering::Relaxed));
        let mut out = BufWriter::new(File::create(path)?);
        for slot in slots {
            serde_json::to_writer(&mut out, &slot.entry).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: CacheConfig) -> Result<Self, CacheError> {
        let mut cache = Self::new(cfg)?;
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CachedAnswer = serde_json::from_str(&line).map_err(|e| CacheError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })?;
            cache.store(entry);
        }
        Ok(cache)
    }
}
