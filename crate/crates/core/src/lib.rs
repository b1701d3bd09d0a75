//! Retrieval-augmented question answering for exam-preparation corpora.
//!
//! The pipeline: [`corpus`] cleans and chunks study documents, [`embed`]
//! turns chunks and queries into unit vectors, [`index`] answers exact cosine
//! top-k queries, [`prompt`] renders retrieved passages into a prompt under a
//! character budget, and [`llm`] runs the generation and trims its output.
//! [`engine`] ties these together per conversation turn, with [`cache`] and
//! [`session`] handling repeated questions, small talk and follow-ups.
//!
//! [`eval`] scores answers against expert references: a word n-gram cosine
//! similarity `S`, an expert grade `G`, and their mean `E`.

pub mod cache;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod engine;
pub mod eval;
pub mod index;
pub mod llm;
pub mod prompt;
pub mod session;

pub use cache::{AnswerCache, CacheConfig, CacheStrategy, CachedAnswer};
pub use config::ServiceConfig;
pub use corpus::{Chunk, ChunkConfig, Document, IngestReport};
pub use embed::{Embedder, EmbedderConfig, Embedding, LocalEmbedder};
pub use engine::{Answer, CacheOverride, Engine, EngineError, TurnSettings};
pub use eval::{EvalRecord, EvalSummary};
pub use index::{KnowledgeBase, RetrievedContext, VectorIndex};
pub use llm::{Generation, GenerationParams, LlmBackend, MockBackend};
pub use prompt::{PromptBudget, PromptBundle};
pub use session::{Intent, Session};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
