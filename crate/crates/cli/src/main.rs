mod repl;

use std::collections::BTreeMap;
use std::io::{self, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use medrag_core::corpus::ChunkConfig;
use medrag_core::eval::{self, report_csv, Rounding};
use medrag_core::llm::LlmBackendKind;
use medrag_core::session::Session;
use medrag_core::{Engine, ServiceConfig};

const DEFAULT_INDEX_DIR: &str = "medrag-index";

#[derive(Parser, Debug)]
#[command(name = "medrag", version, about = "Question answering over study notes with retrieval-augmented generation")]
struct Cli {
    /// JSON config file; MEDRAG_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory of the persisted index.
    #[arg(long, global = true)]
    index: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Reply script for the mock backend.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Passages retrieved per question.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    #[arg(long, global = true)]
    max_sentences: Option<usize>,
    #[arg(long, global = true, value_enum)]
    cache: Option<CacheArg>,
    #[arg(long, global = true)]
    max_distance: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Mock,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CacheArg {
    Off,
    Exact,
    Distance,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load documents (files or directories) into the index.
    Ingest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        chunk_overlap: Option<usize>,
    },
    /// Answer one question and list its sources.
    Ask { query: String },
    /// Interactive question loop.
    Chat {
        /// Print retrieved chunk ids after each answer.
        #[arg(long)]
        sources: bool,
    },
    /// Score answers and write the report CSV.
    Eval {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        grades: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Word n-gram sizes for S, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
        n_values: Vec<usize>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("MEDRAG_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, String> {
    let mut cfg = ServiceConfig::load(cli.config.as_deref()).map_err(|e| e.to_string())?;
    if let Some(dir) = &cli.index {
        cfg.index_path = Some(dir.display().to_string());
    }
    if cfg.index_path.is_none() {
        cfg.index_path = Some(DEFAULT_INDEX_DIR.into());
    }
    if let Some(b) = cli.backend {
        cfg.llm.backend = match b {
            Backend::Mock => LlmBackendKind::Mock,
            Backend::Remote => LlmBackendKind::Remote,
        };
    }
    if let Some(p) = &cli.mock_script {
        cfg.llm.mock_script = Some(p.display().to_string());
    }
    if let Some(k) = cli.k {
        cfg.retrieval_k = k;
    }
    let g = &mut cfg.generation;
    if let Some(t) = cli.temperature {
        g.temperature = t;
    }
    if let Some(p) = cli.top_p {
        g.top_p = p;
    }
    if let Some(m) = cli.max_tokens {
        g.max_tokens = m;
    }
    if cli.max_sentences.is_some() {
        g.max_sentences = cli.max_sentences;
    }
    if let Some(c) = cli.cache {
        let name = match c {
            CacheArg::Off => "off",
            CacheArg::Exact => "exact",
            CacheArg::Distance => "distance",
        };
        cfg.set_cache_strategy(name).map_err(|e| e.to_string())?;
    }
    if let Some(d) = cli.max_distance {
        if let Some(c) = cfg.cache.as_mut() {
            c.max_distance = d;
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest {
            paths,
            chunk_size,
            chunk_overlap,
        } => {
            let chunking = ChunkConfig::new(
                chunk_size.unwrap_or(cfg.chunking.chunk_size),
                chunk_overlap.unwrap_or(cfg.chunking.chunk_overlap),
            )
            .map_err(|e| e.to_string())?;
            ingest(&cfg, &paths, &chunking)
        }
        Command::Ask { query } => ask(&cfg, &query),
        Command::Chat { sources } => {
            let engine = Engine::from_config(&cfg).map_err(|e| e.to_string())?;
            let stdin = io::stdin();
            let opts = repl::ReplOptions {
                echo: !stdin.is_terminal(),
                show_sources: sources,
            };
            repl::run(&engine, &cfg.generation, stdin.lock(), io::stdout().lock(), &opts).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            items,
            grades,
            out,
            n_values,
        } => run_eval(&items, grades.as_deref(), out.as_deref(), &n_values),
        Command::Serve { bind } => {
            if let Some(b) = bind {
                cfg.bind_address = b;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(medrag_service::serve(&cfg)).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Files given directly, plus `.txt`/`.md` files found under directories.
fn expand_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, String> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| format!("cannot read {}: {e}", p.display()))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|f| {
                    f.is_file()
                        && f.extension()
                            .and_then(|x| x.to_str())
                            .is_some_and(|x| matches!(x, "txt" | "md" | "markdown"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn ingest(cfg: &ServiceConfig, paths: &[PathBuf], chunking: &ChunkConfig) -> Result<ExitCode, String> {
    let engine = Engine::from_config(cfg).map_err(|e| e.to_string())?;
    let files = expand_paths(paths)?;
    let report = engine.ingest(&files, chunking).map_err(|e| e.to_string())?;
    for f in &report.failures {
        eprintln!("warning: skipped {}: {}", f.path, f.reason);
    }
    let dir = cfg.index_path.as_deref().unwrap_or(DEFAULT_INDEX_DIR);
    engine.persist(Path::new(dir)).map_err(|e| e.to_string())?;
    println!(
        "ingested {} documents, {} chunks; index now holds {} chunks ({dir})",
        report.documents,
        report.chunks,
        engine.chunk_count()
    );
    Ok(ExitCode::SUCCESS)
}

fn ask(cfg: &ServiceConfig, query: &str) -> Result<ExitCode, String> {
    let engine = Engine::from_config(cfg).map_err(|e| e.to_string())?;
    let answer = engine.next_turn(&mut Session::new(), query, &cfg.generation);
    if let Some(failure) = &answer.error {
        eprintln!("error: {}", failure.message);
        return Ok(ExitCode::from(2));
    }
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{}", answer.text);
    if !answer.sources.is_empty() {
        let _ = writeln!(out, "\nSources:");
        for (i, s) in answer.sources.iter().enumerate() {
            let _ = writeln!(out, "{}. {} (score {:.4})", i + 1, s.chunk_id, s.score);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_eval(items: &Path, grades: Option<&Path>, out: Option<&Path>, n_values: &[usize]) -> Result<ExitCode, String> {
    let text = std::fs::read_to_string(items).map_err(|e| format!("cannot read {}: {e}", items.display()))?;
    let inputs = eval::parse_items_csv(&text).map_err(|e| format!("{}: {e}", items.display()))?;
    let grades = match grades {
        Some(path) if !path.exists() => {
            eprintln!("warning: grades file {} not found; reporting S only", path.display());
            BTreeMap::new()
        }
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            eval::parse_grades_csv(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => BTreeMap::new(),
    };
    let n_values = n_values.iter().copied().collect();
    let run = eval::run_eval(&inputs, &grades, &n_values, &Rounding::default()).map_err(|e| e.to_string())?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let csv = report_csv(&run);
    let mut stdout = io::stdout().lock();
    if let Some(s) = &run.summary {
        let _ = writeln!(stdout, "{} {} {}", s.rounded_mean_s, s.rounded_mean_g, s.rounded_mean_e);
    }
    match out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        }
        None => {
            let _ = write!(stdout, "{csv}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
