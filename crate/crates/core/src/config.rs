//! Service configuration: one JSON file plus `MEDRAG_*` environment overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, CacheStrategy};
use crate::corpus::ChunkConfig;
use crate::embed::{EmbedBackend, EmbedderConfig};
use crate::engine::{EngineError, TurnSettings};
use crate::llm::{GenerationParams, LlmBackendKind, LlmConfig};
use crate::prompt::{PromptBudget, Shot, DEFAULT_FENCE, DEFAULT_SYSTEM_PROMPT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind_address: String,
    pub corpus_paths: Vec<String>,
    pub chunking: ChunkConfig,
    pub embedder: EmbedderConfig,
    pub retrieval_k: usize,
    pub budget: PromptBudget,
    pub generation: GenerationParams,
    /// `null` disables the answer cache.
    pub cache: Option<CacheConfig>,
    pub llm: LlmConfig,
    pub system_prompt: Option<String>,
    pub constraints: Option<String>,
    pub shots: Vec<Shot>,
    pub fence: String,
    pub expansion_window: usize,
    pub intents_path: Option<String>,
    pub stopwords_path: Option<String>,
    pub strings_path: Option<String>,
    /// Directory holding the persisted index; in-memory only when absent.
    pub index_path: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind_address: "127.0.0.1:7878".into(),
            corpus_paths: Vec::new(),
            chunking: ChunkConfig::default(),
            embedder: EmbedderConfig::default(),
            retrieval_k: 4,
            budget: PromptBudget::default(),
            generation: GenerationParams::default(),
            cache: Some(CacheConfig::default()),
            llm: LlmConfig::default(),
            system_prompt: Some(DEFAULT_SYSTEM_PROMPT.into()),
            constraints: None,
            shots: Vec::new(),
            fence: DEFAULT_FENCE.into(),
            expansion_window: 2,
            intents_path: None,
            stopwords_path: None,
            strings_path: None,
            index_path: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path` (or starts from defaults) and applies environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, EngineError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), EngineError> {
        let bad = |k: &str, v: &str| EngineError::Config(format!("invalid value {v:?} for {k}"));
        if let Some(v) = var("MEDRAG_BIND") {
            self.bind_address = v;
        }
        if let Some(v) = var("MEDRAG_INDEX_PATH") {
            self.index_path = Some(v);
        }
        if let Some(v) = var("MEDRAG_K") {
            self.retrieval_k = v.parse().map_err(|_| bad("MEDRAG_K", &v))?;
        }
        if let Some(v) = var("MEDRAG_BACKEND") {
            self.llm.backend = match v.as_str() {
                "mock" => LlmBackendKind::Mock,
                "remote" => LlmBackendKind::Remote,
                _ => return Err(bad("MEDRAG_BACKEND", &v)),
            };
        }
        if let Some(v) = var("MEDRAG_MOCK_SCRIPT") {
            self.llm.mock_script = Some(v);
        }
        if let Some(v) = var("MEDRAG_LLM_URL") {
            self.llm.url = v;
        }
        if let Some(v) = var("MEDRAG_LLM_KEY") {
            self.llm.key = Some(v);
        }
        if let Some(v) = var("MEDRAG_LLM_MODEL") {
            self.llm.model = v;
        }
        if let Some(v) = var("MEDRAG_EMBED_BACKEND") {
            self.embedder.backend = match v.as_str() {
                "local" => EmbedBackend::Local,
                "remote" => EmbedBackend::Remote,
                _ => return Err(bad("MEDRAG_EMBED_BACKEND", &v)),
            };
        }
        if let Some(v) = var("MEDRAG_EMBED_URL") {
            self.embedder.remote_endpoint = v;
        }
        if let Some(v) = var("MEDRAG_EMBED_KEY") {
            self.embedder.remote_key = Some(v);
        }
        if let Some(v) = var("MEDRAG_CACHE") {
            self.set_cache_strategy(&v).map_err(|_| bad("MEDRAG_CACHE", &v))?;
        }
        Ok(())
    }

    /// `off`, `exact` or `distance`.
    pub fn set_cache_strategy(&mut self, name: &str) -> Result<(), EngineError> {
        let strategy = match name {
            "off" => {
                self.cache = None;
                return Ok(());
            }
            "exact" => CacheStrategy::Exact,
            "distance" => CacheStrategy::Distance,
            other => return Err(EngineError::Config(format!("unknown cache strategy {other:?}"))),
        };
        self.cache.get_or_insert_with(CacheConfig::default).strategy = strategy;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.chunking.validate()?;
        self.embedder.validate()?;
        self.generation.validate()?;
        if let Some(c) = &self.cache {
            c.validate()?;
        }
        if self.budget.max_chars == 0 {
            return Err(EngineError::Config("budget.max_chars must be positive".into()));
        }
        Ok(())
    }

    pub fn cache_config(&self) -> Option<CacheConfig> {
        self.cache
    }

    pub fn turn_settings(&self) -> TurnSettings {
        TurnSettings {
            k: self.retrieval_k,
            budget: self.budget,
            fence: self.fence.clone(),
            system_prompt: self.system_prompt.clone(),
            constraints: self.constraints.clone(),
            shots: self.shots.clone(),
            expansion_window: self.expansion_window,
            params: self.generation.clone(),
        }
    }
}
