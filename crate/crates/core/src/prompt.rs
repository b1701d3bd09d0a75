//! Prompt assembly: system text, fenced context passages, few-shot
//! demonstrations, an optional output-format directive and the user turn.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{rank_order, RetrievedContext};

pub const DEFAULT_FENCE: &str = "###";

/// Shipped default; not taken from any published prompt.
pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a study assistant for medical licensing exam preparation. \
Answer the user's question using the reference passages enclosed between ### markers. \
If the passages do not contain the answer, say so briefly instead of guessing. \
Reply to greetings and small talk naturally without citing the passages.";

pub const SINGLE_SENTENCE_DIRECTIVE: &str = "Answer in a single, concise, comprehensive sentence";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("prompt budget of {max_chars} chars is {shortfall} short of the {required} chars required")]
    Budget {
        required: usize,
        max_chars: usize,
        shortfall: usize,
    },
}

/// One demonstration pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub user: String,
    pub assistant: String,
}

impl Shot {
    pub fn new(user: impl Into<String>, assistant: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            assistant: assistant.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: Option<String>,
    pub shots: Vec<Shot>,
    pub context_blocks: Vec<RetrievedContext>,
    pub query: String,
    pub constraints: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptBudget {
    pub max_chars: usize,
    pub chars_per_token: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            max_chars: 8000,
            chars_per_token: 4,
        }
    }
}

impl PromptBudget {
    pub fn new(max_chars: usize) -> Self {
        Self {
            max_chars,
            ..Self::default()
        }
    }

    /// Rough token estimate for a rendered prompt.
    pub fn estimate_tokens(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.chars_per_token.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub text: String,
    /// Context blocks that made it into the prompt, best first.
    pub included: Vec<RetrievedContext>,
}

/// `"User: {u}\nAssistant: {a}\n"` per pair.
pub fn render_shots(shots: &[Shot]) -> String {
    shots
        .iter()
        .map(|s| format!("User: {}\nAssistant: {}\n", s.user, s.assistant))
        .collect()
}

pub fn assemble(bundle: &PromptBundle, budget: &PromptBudget) -> Result<String, PromptError> {
    assemble_with_fence(bundle, budget, DEFAULT_FENCE).map(|p| p.text)
}

/// Renders the bundle, adding context blocks best-first until the next one
/// would overflow the budget. Blocks are never cut.
pub fn assemble_with_fence(
    bundle: &PromptBundle,
    budget: &PromptBudget,
    fence: &str,
) -> Result<AssembledPrompt, PromptError> {
    if bundle.query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let mut head = Vec::new();
    if let Some(system) = bundle.system.as_deref().filter(|s| !s.is_empty()) {
        head.push(system.to_string());
    }
    let mut tail = Vec::new();
    let shots = render_shots(&bundle.shots);
    if !shots.is_empty() {
        tail.push(shots.trim_end_matches('\n').to_string());
    }
    let user_turn = format!("User: {}", bundle.query);
    tail.push(match bundle.constraints.as_deref().filter(|c| !c.is_empty()) {
        Some(c) => format!("{c}\n{user_turn}"),
        None => user_turn,
    });

    let sep = "\n\n";
    let mandatory = head
        .iter()
        .chain(&tail)
        .map(|s| s.chars().count())
        .sum::<usize>()
        + sep.len() * (head.len() + tail.len() - 1);
    if mandatory > budget.max_chars {
        return Err(PromptError::Budget {
            required: mandatory,
            max_chars: budget.max_chars,
            shortfall: mandatory - budget.max_chars,
        });
    }

    let mut ranked: Vec<&RetrievedContext> = bundle.context_blocks.iter().collect();
    ranked.sort_by(|a, b| rank_order(a.score, &a.chunk_id, b.score, &b.chunk_id));

    let mut used = mandatory;
    let mut blocks = Vec::new();
    let mut included = Vec::new();
    for ctx in ranked {
        let block = format!("{fence}\n{}\n{fence}", ctx.text);
        let cost = block.chars().count() + sep.len();
        if used + cost > budget.max_chars {
            break;
        }
        used += cost;
        blocks.push(block);
        included.push(ctx.clone());
    }

    let text = head
        .into_iter()
        .chain(blocks)
        .chain(tail)
        .collect::<Vec<_>>()
        .join(sep);
    debug_assert_eq!(text.chars().count(), used);
    Ok(AssembledPrompt { text, included })
}
