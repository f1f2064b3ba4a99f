use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dcnlab::config::{load_config, reference_toml, ExperimentConfig};
use dcnlab::experiment::{run_eval, METRICS_FILE};
use dcnlab::knowledge::ChunkStore;
use dcnlab::llm::{formulate, Backend, FormulationRequest, RemoteConfig};
use dcnlab::topology::build_topology;

#[derive(Parser)]
#[command(name = "dcnlab", version, about = "Knowledge-chunk placement lab for simulated data center networks")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print node/link counts and the host-pair hop histogram.
    Topo,
    /// Chunk and embed every file of a directory into the chunk store.
    Ingest {
        #[arg(long)]
        corpus: String,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        /// Chunk store file (overrides knowledge.store_path).
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Route a query and list the nearest chunks.
    Query {
        #[arg(long)]
        text: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Build a placement-problem formulation from a description and retrieved chunks.
    Formulate {
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value_t = BackendArg::Mock)]
        backend: BackendArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train one seed and write its metrics and checkpoint.
    Train,
    /// Train every configured seed and write metrics plus a summary table.
    Eval,
    /// Print the configuration reference with all defaults.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Remote,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    Ok(cfg)
}

fn store_path(cfg: &ExperimentConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.knowledge.store_path.clone())
}

fn load_store(path: &Path, dim: usize) -> Result<ChunkStore> {
    if path.exists() {
        ChunkStore::load(path).with_context(|| format!("reading chunk store {}", path.display()))
    } else {
        Ok(ChunkStore::new(dim))
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load(&cli)?;
    match &cli.command {
        Command::Topo => {
            let topo = build_topology(&cfg.topology)?;
            print!("{}", topo.describe());
        }
        Command::Config => print!("{}", reference_toml()),
        Command::Ingest {
            corpus,
            dir,
            window,
            overlap,
            store,
        } => {
            let path = store_path(&cfg, store);
            let mut chunks = load_store(&path, cfg.knowledge.embedding_dim)?;
            let window = window.unwrap_or(cfg.knowledge.window);
            let overlap = overlap.unwrap_or(cfg.knowledge.overlap);
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("listing {}", dir.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.is_file());
            files.sort();
            let mut added = 0;
            for file in &files {
                let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
                let doc_id = file.file_name().unwrap_or_default().to_string_lossy();
                added += chunks.ingest_document(&doc_id, corpus, &text, window, overlap)?.len();
            }
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            chunks.save(&path)?;
            if !cli.quiet {
                println!(
                    "ingested {} documents into {added} chunks; store {} now holds {}",
                    files.len(),
                    path.display(),
                    chunks.len()
                );
            }
        }
        Command::Query { text, k, store } => {
            let chunks = ChunkStore::load(&store_path(&cfg, store))?;
            println!("route: {}", chunks.route(text)?);
            for (c, d) in chunks.retrieve_top_k(text, k.unwrap_or(cfg.knowledge.top_k))? {
                let server = c.server_index.map_or("-".to_string(), |s| s.to_string());
                println!("{:.6}\t{}\t{}\t{}\tserver {server}\t{}", d, c.chunk_id, c.corpus, c.doc_id, c.text);
            }
        }
        Command::Formulate { text, backend, k, store } => {
            let chunks = load_store(&store_path(&cfg, store), cfg.knowledge.embedding_dim)?;
            let retrieved = chunks
                .retrieve_top_k(text, k.unwrap_or(cfg.knowledge.top_k))?
                .into_iter()
                .map(|(c, _)| c.text.clone())
                .collect();
            let backend = match backend {
                BackendArg::Mock => Backend::Mock,
                BackendArg::Remote => Backend::Remote(RemoteConfig::from_env()?),
            };
            let result = formulate(
                &FormulationRequest {
                    description: text.clone(),
                    retrieved,
                },
                &backend,
            )?;
            println!("{}", result.text);
        }
        Command::Train | Command::Eval => {
            let seeds = match cli.command {
                Command::Train => vec![cfg.seed],
                _ => cfg.seeds(),
            };
            let out = cfg.run.out_dir.clone();
            if !cli.quiet {
                eprintln!(
                    "training {} seed(s) x {} episodes into {}",
                    seeds.len(),
                    cfg.run.episodes,
                    out.display()
                );
            }
            let summary = run_eval(&cfg, &seeds, &out)?;
            if !cli.quiet {
                print!("{}", summary.table());
                println!("metrics: {}", out.join(METRICS_FILE).display());
            }
        }
    }
    Ok(())
}
