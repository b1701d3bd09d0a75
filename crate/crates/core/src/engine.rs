//! Turn execution: intent routing, answer cache, retrieval, prompt assembly
//! and generation, wired to the shared knowledge base.

use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{AnswerCache, CacheConfig, CachedAnswer};
use crate::config::ServiceConfig;
use crate::corpus::{ingest_corpus, ChunkConfig, IngestError, IngestReport};
use crate::embed::{build_embedder, EmbedError, Embedder};
use crate::index::{IndexError, KnowledgeBase, RetrievedContext};
use crate::llm::{build_backend, generate, GenerationParams, LlmBackend, LlmError};
use crate::prompt::{assemble_with_fence, PromptBudget, PromptBundle, PromptError, Shot, DEFAULT_FENCE};
use crate::session::{classify_intent, expand_query, Intent, IntentRules, PersonaStrings, Session, SessionError, Stopwords, Turn};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Cache(#[from] crate::cache::CacheError),
    #[error("config error: {0}")]
    Config(String),
}

/// Per-turn cache choice.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CacheOverride {
    /// Whatever the engine was built with.
    #[default]
    Default,
    Off,
    Use(CacheConfig),
}

/// Knobs applied to every turn.
#[derive(Debug, Clone)]
pub struct TurnSettings {
    pub k: usize,
    pub budget: PromptBudget,
    pub fence: String,
    pub system_prompt: Option<String>,
    pub constraints: Option<String>,
    pub shots: Vec<Shot>,
    pub expansion_window: usize,
    pub params: GenerationParams,
}

impl Default for TurnSettings {
    fn default() -> Self {
        Self {
            k: 4,
            budget: PromptBudget::default(),
            fence: DEFAULT_FENCE.into(),
            system_prompt: Some(crate::prompt::DEFAULT_SYSTEM_PROMPT.into()),
            constraints: None,
            shots: Vec::new(),
            expansion_window: 2,
            params: GenerationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnFailure {
    pub message: String,
    pub retriable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub intent: Intent,
    pub sources: Vec<RetrievedContext>,
    pub cached: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<TurnFailure>,
}

pub struct Engine {
    kb: RwLock<KnowledgeBase>,
    embedder: Box<dyn Embedder>,
    backend: Arc<dyn LlmBackend>,
    cache: RwLock<AnswerCache>,
    /// Strategy used when a turn does not override it; `None` means off.
    cache_default: Option<CacheConfig>,
    intents: IntentRules,
    stopwords: Stopwords,
    strings: PersonaStrings,
    settings: TurnSettings,
}

pub struct EngineBuilder {
    kb: Option<KnowledgeBase>,
    embedder: Box<dyn Embedder>,
    backend: Arc<dyn LlmBackend>,
    cache: Option<CacheConfig>,
    intents: IntentRules,
    stopwords: Stopwords,
    strings: PersonaStrings,
    settings: TurnSettings,
}

impl EngineBuilder {
    pub fn knowledge_base(mut self, kb: KnowledgeBase) -> Self {
        self.kb = Some(kb);
        self
    }

    pub fn cache(mut self, cfg: Option<CacheConfig>) -> Self {
        self.cache = cfg;
        self
    }

    pub fn intents(mut self, intents: IntentRules) -> Self {
        self.intents = intents;
        self
    }

    pub fn stopwords(mut self, stopwords: Stopwords) -> Self {
        self.stopwords = stopwords;
        self
    }

    pub fn strings(mut self, strings: PersonaStrings) -> Self {
        self.strings = strings;
        self
    }

    pub fn settings(mut self, settings: TurnSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn build(self) -> Result<Engine, EngineError> {
        self.settings.params.validate()?;
        let kb = match (self.kb, self.embedder.dim()) {
            (Some(kb), _) => kb,
            (None, Some(dim)) => KnowledgeBase::new(dim),
            (None, None) => return Err(EngineError::Config("embedder dimension unknown".into())),
        };
        let dim = self.embedder.dim().unwrap_or(kb.index.dim());
        if kb.index.dim() != dim {
            return Err(EngineError::Config(format!(
                "index dimension {} does not match embedder dimension {dim}",
                kb.index.dim()
            )));
        }
        let storage = AnswerCache::new(self.cache.unwrap_or_default())?;
        Ok(Engine {
            kb: RwLock::new(kb),
            embedder: self.embedder,
            backend: self.backend,
            cache: RwLock::new(storage),
            cache_default: self.cache,
            intents: self.intents,
            stopwords: self.stopwords,
            strings: self.strings,
            settings: self.settings,
        })
    }
}

impl Engine {
    pub fn builder(embedder: Box<dyn Embedder>, backend: Arc<dyn LlmBackend>) -> EngineBuilder {
        EngineBuilder {
            kb: None,
            embedder,
            backend,
            cache: None,
            intents: IntentRules::default(),
            stopwords: Stopwords::default(),
            strings: PersonaStrings::default(),
            settings: TurnSettings::default(),
        }
    }

    /// Builds every component from a config, loading a saved index from
    /// `index_path` when one exists.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let embedder = build_embedder(&cfg.embedder)?;
        let backend: Arc<dyn LlmBackend> = Arc::from(build_backend(&cfg.llm)?);
        let kb = match &cfg.index_path {
            Some(dir) => KnowledgeBase::load_or_new(Path::new(dir), cfg.embedder.dim)?,
            None => KnowledgeBase::new(cfg.embedder.dim),
        };
        let mut builder = Self::builder(embedder, backend)
            .knowledge_base(kb)
            .cache(cfg.cache_config())
            .settings(cfg.turn_settings());
        if let Some(p) = &cfg.intents_path {
            builder = builder.intents(IntentRules::load(Path::new(p))?);
        }
        if let Some(p) = &cfg.stopwords_path {
            builder = builder.stopwords(Stopwords::load(Path::new(p))?);
        }
        if let Some(p) = &cfg.strings_path {
            builder = builder.strings(PersonaStrings::load(Path::new(p))?);
        }
        builder.build()
    }

    pub fn settings(&self) -> &TurnSettings {
        &self.settings
    }

    pub fn strings(&self) -> &PersonaStrings {
        &self.strings
    }

    pub fn intents(&self) -> &IntentRules {
        &self.intents
    }

    pub fn knowledge_base(&self) -> RwLockReadGuard<'_, KnowledgeBase> {
        self.kb.read().unwrap_or_else(|e| e.into_inner())
    }

    fn knowledge_base_mut(&self) -> RwLockWriteGuard<'_, KnowledgeBase> {
        self.kb.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn chunk_count(&self) -> usize {
        self.knowledge_base().len()
    }

    /// The cache storage. Entries exist only if some turn ran with caching on.
    pub fn cache(&self) -> RwLockReadGuard<'_, AnswerCache> {
        self.cache.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn cache_default(&self) -> Option<CacheConfig> {
        self.cache_default
    }

    /// Loads, chunks, embeds and upserts the given files. Chunks with no
    /// embeddable text are skipped.
    pub fn ingest<P: AsRef<Path> + Sync>(&self, paths: &[P], chunking: &ChunkConfig) -> Result<IngestReport, EngineError> {
        let corpus = ingest_corpus(paths, chunking)?;
        let embedded: Vec<_> = corpus
            .chunks
            .par_iter()
            .map(|chunk| (chunk, self.embedder.embed(&chunk.text)))
            .collect();
        let mut kb = self.knowledge_base_mut();
        for (chunk, embedding) in embedded {
            match embedding {
                Ok(e) => kb.upsert(chunk.clone(), e)?,
                Err(EmbedError::ZeroText) => {
                    tracing::warn!(chunk_id = %chunk.chunk_id, "chunk has no embeddable text; skipped")
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(corpus.report())
    }

    pub fn persist(&self, dir: &Path) -> Result<(), EngineError> {
        self.knowledge_base().persist(dir)?;
        Ok(())
    }

    /// Runs one turn and appends it to `session`. Failures are reported in
    /// the returned answer and recorded in the transcript; the session stays
    /// usable.
    pub fn next_turn(&self, session: &mut Session, query: &str, params: &GenerationParams) -> Answer {
        self.next_turn_with(session, query, params, CacheOverride::Default)
    }

    /// [`Engine::next_turn`] with a per-turn cache choice.
    pub fn next_turn_with(&self, session: &mut Session, query: &str, params: &GenerationParams, cache: CacheOverride) -> Answer {
        let cache = match cache {
            CacheOverride::Default => self.cache_default,
            CacheOverride::Off => None,
            CacheOverride::Use(cfg) => Some(cfg),
        };
        let answer = self.answer(session, query, params, cache.as_ref());
        session.push(Turn {
            query: query.to_string(),
            answer: answer.text.clone(),
            intent: answer.intent,
            sources: answer.sources.clone(),
            cached: answer.cached,
            failed: answer.error.is_some(),
            at: Utc::now(),
        });
        answer
    }

    fn answer(&self, session: &Session, query: &str, params: &GenerationParams, cache: Option<&CacheConfig>) -> Answer {
        let intent = classify_intent(query, &self.intents);
        if intent != Intent::Question {
            let text = self.intents.reply_for_query(query).unwrap_or_default().to_string();
            return canned(text, intent);
        }
        if self.knowledge_base().is_empty() {
            return canned(self.strings.empty_corpus.clone(), Intent::Question);
        }
        match self.answer_question(session, query, params, cache) {
            Ok(answer) => answer,
            Err(EngineError::Embed(EmbedError::ZeroText)) => canned(self.strings.no_terms.clone(), Intent::Question),
            Err(err) => {
                let retriable = match &err {
                    EngineError::Llm(e) => e.is_retriable(),
                    EngineError::Embed(e) => e.is_retriable(),
                    _ => false,
                };
                tracing::warn!(error = %err, "turn failed");
                Answer {
                    text: self.strings.backend_failure.clone(),
                    intent: Intent::Question,
                    sources: Vec::new(),
                    cached: false,
                    error: Some(TurnFailure {
                        message: err.to_string(),
                        retriable,
                    }),
                }
            }
        }
    }

    fn answer_question(
        &self,
        session: &Session,
        query: &str,
        params: &GenerationParams,
        cache: Option<&CacheConfig>,
    ) -> Result<Answer, EngineError> {
        params.validate()?;
        if let Some(cfg) = cache {
            cfg.validate()?;
        }
        let query_embedding = self.embedder.embed(query)?;
        if let Some(hit) = cache.and_then(|cfg| self.cache().lookup_as(query, Some(&query_embedding), cfg)) {
            return Ok(Answer {
                text: hit.answer.text,
                intent: Intent::Question,
                sources: hit.sources,
                cached: true,
                error: None,
            });
        }

        let expanded = expand_query(query, session, self.settings.expansion_window, &self.stopwords);
        let retrieval_embedding = if expanded == query {
            query_embedding.clone()
        } else {
            self.embedder.embed(&expanded)?
        };
        let retrieved = self.knowledge_base().retrieve(&retrieval_embedding, self.settings.k)?;

        let bundle = PromptBundle {
            system: self.settings.system_prompt.clone(),
            shots: self.settings.shots.clone(),
            context_blocks: retrieved,
            query: query.to_string(),
            constraints: self.settings.constraints.clone(),
        };
        let prompt = assemble_with_fence(&bundle, &self.settings.budget, &self.settings.fence).map_err(|e| match e {
            PromptError::Budget { .. } | PromptError::EmptyQuery => EngineError::Config(e.to_string()),
        })?;
        let generation = generate(&prompt.text, params, self.backend.as_ref())?;
        if cache.is_some() {
            let entry = CachedAnswer::new(query, query_embedding, generation.clone(), prompt.included.clone());
            self.cache.write().unwrap_or_else(|e| e.into_inner()).store(entry);
        }
        Ok(Answer {
            text: generation.text,
            intent: Intent::Question,
            sources: prompt.included,
            cached: false,
            error: None,
        })
    }
}

fn canned(text: String, intent: Intent) -> Answer {
    Answer {
        text,
        intent,
        sources: Vec::new(),
        cached: false,
        error: None,
    }
}

impl IntentRules {
    fn reply_for_query(&self, query: &str) -> Option<&str> {
        self.matching(query).and_then(|r| r.canned_reply.as_deref())
    }
}
