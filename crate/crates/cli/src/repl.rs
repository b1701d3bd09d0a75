//! The interactive question loop.

use std::io::{self, BufRead, Write};

use medrag_core::llm::GenerationParams;
use medrag_core::session::{Intent, Session};
use medrag_core::Engine;

pub struct ReplOptions {
    /// Repeat each input line after its prompt (for piped, non-terminal input).
    pub echo: bool,
    pub show_sources: bool,
}

enum Step {
    Question(String),
    Done,
}

fn read_line(input: &mut impl BufRead, out: &mut impl Write, echo: bool) -> io::Result<Option<String>> {
    out.flush()?;
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        if echo {
            writeln!(out)?;
        }
        return Ok(None);
    }
    let line = line.trim_end_matches(['\r', '\n']).to_string();
    if echo {
        writeln!(out, "{line}")?;
    }
    Ok(Some(line))
}

/// Runs until a farewell, a "no" at the continue prompt, or end of input.
pub fn run(
    engine: &Engine,
    params: &GenerationParams,
    mut input: impl BufRead,
    mut out: impl Write,
    opts: &ReplOptions,
) -> io::Result<Session> {
    let strings = engine.strings().clone();
    let mut session = Session::new();
    writeln!(out, "Bot: {}", strings.opening)?;

    let mut pending: Option<String> = None;
    loop {
        let query = match pending.take() {
            Some(q) => q,
            None => {
                write!(out, "You: ")?;
                match read_line(&mut input, &mut out, opts.echo)? {
                    Some(q) => q,
                    None => return Ok(session),
                }
            }
        };
        if query.trim().is_empty() {
            continue;
        }
        let answer = engine.next_turn(&mut session, &query, params);
        writeln!(out, "Bot: {}", answer.text)?;
        if answer.intent == Intent::Farewell {
            return Ok(session);
        }
        if opts.show_sources && !answer.sources.is_empty() {
            let ids: Vec<&str> = answer.sources.iter().map(|s| s.chunk_id.as_str()).collect();
            writeln!(out, "Sources: {}", ids.join(", "))?;
        }
        match continue_prompt(engine, &mut input, &mut out, opts)? {
            Step::Done => return Ok(session),
            Step::Question(q) => pending = (!q.is_empty()).then_some(q),
        }
    }
}

fn continue_prompt(
    engine: &Engine,
    input: &mut impl BufRead,
    out: &mut impl Write,
    opts: &ReplOptions,
) -> io::Result<Step> {
    let strings = engine.strings();
    loop {
        write!(out, "{}", strings.continue_prompt)?;
        let Some(reply) = read_line(input, out, opts.echo)? else {
            return Ok(Step::Done);
        };
        match reply.trim().to_lowercase().as_str() {
            "" => continue,
            "yes" | "y" => {
                writeln!(out, "{}", strings.next_question)?;
                return Ok(Step::Question(String::new()));
            }
            "no" | "n" => {
                let farewell = engine.intents().reply_for(Intent::Farewell).unwrap_or_default();
                writeln!(out, "Bot: {farewell}")?;
                return Ok(Step::Done);
            }
            // anything else is taken as the next question
            _ => return Ok(Step::Question(reply)),
        }
    }
}
