//! `sourcerank`: stage-by-stage pipeline for recommending news sources.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sourcerank::index::{Association, Index};
use sourcerank::mlrf::FilterConfig;
use sourcerank::pipeline::{
    run_all, stage_evaluate, stage_index, stage_ingest, stage_rerank, stage_retrieve, stage_split, stage_synth,
    BiasChoice, Layout, Manifest, PipelineConfig, PipelineError, RankerChoice,
};
use sourcerank::retrieval::{RetrievalModel, Scorer};
use sourcerank::synth::SyntheticSpec;

#[derive(Parser, Debug)]
#[command(name = "sourcerank", version, about = "Recommend news sources for a headline")]
struct Cli {
    /// Pipeline settings (TOML). Relative paths inside resolve against the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and normalize the raw corpus.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Chronological train/valid/test split plus test queries and gold.
    Split {
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        n_valid: Option<usize>,
    },
    /// Build the term index over the training split.
    Index,
    /// Rank sources for every test query, or for one ad hoc query.
    Retrieve(RetrieveArgs),
    /// Rerank retrieved candidates with the multi-layer filter.
    Rerank(RerankArgs),
    /// Score every system and write the comparison report.
    Evaluate(EvaluateArgs),
    /// Rerank from a recorded response log, then evaluate.
    Replay {
        /// Log written by an earlier `rerank --ranker endpoint --record`.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a seeded synthetic corpus with gold, embeddings and popularity.
    Synth(SynthArgs),
    /// Every stage from ingest to evaluate.
    Run,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModelArg {
    Cer,
    Der,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AssociationArg {
    Uniform,
    Boolean,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    top: Option<usize>,
    #[arg(long, value_enum)]
    association: Option<AssociationArg>,
    /// Rank sources for this text and print them instead of running the stage.
    #[arg(long)]
    query: Option<String>,
    /// Index file for --query; defaults to the one under the output directory.
    #[arg(long, requires = "query")]
    index: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum RankerArg {
    Endpoint,
    Identity,
    Mock,
    Oracle,
    Noisy,
    Replay,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BiasArg {
    Uniform,
    Popularity,
}

#[derive(Args, Debug)]
struct RerankArgs {
    /// Filter settings (TOML, same fields as the [filter] section).
    #[arg(long)]
    filter_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    ranker: Option<RankerArg>,
    /// Response log to replay; implies `--ranker replay` unless one is given.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Append every endpoint request and response to this log.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    error_rate: Option<f64>,
    #[arg(long, value_enum)]
    bias: Option<BiasArg>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Evaluate even if upstream artifacts do not match the current settings.
    #[arg(long)]
    force: bool,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    popularity: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; defaults to `synthetic` under --out.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, default_value_t = SyntheticSpec::default().n_sources)]
    sources: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_docs)]
    docs: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().vocab_size)]
    vocab: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_topics)]
    topics: usize,
    /// Zipf exponent of source popularity; 0 gives uniform popularity.
    #[arg(long, default_value_t = SyntheticSpec::default().popularity_skew)]
    skew: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().off_topic_weight)]
    off_topic: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().embedding_dim)]
    dim: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn announce(m: &Manifest, layout: &Layout) {
    let files: Vec<&str> = m.outputs.keys().map(String::as_str).collect();
    println!("{}: wrote {} in {}", m.stage, files.join(", "), layout.root().join(&m.stage).display());
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(&cli)?;
    let layout = Layout::new(&cfg.out_dir);
    match cli.command {
        Command::Ingest { corpus, lexicon } => {
            cfg.corpus.path = corpus.or(cfg.corpus.path);
            cfg.corpus.lexicon = lexicon.or(cfg.corpus.lexicon);
            cfg.validate()?;
            announce(&stage_ingest(&cfg, &layout)?, &layout);
        }
        Command::Split { n_test, n_valid } => {
            cfg.split.n_test = n_test.unwrap_or(cfg.split.n_test);
            cfg.split.n_valid = n_valid.unwrap_or(cfg.split.n_valid);
            cfg.validate()?;
            announce(&stage_split(&cfg, &layout)?, &layout);
        }
        Command::Index => {
            cfg.validate()?;
            announce(&stage_index(&cfg, &layout)?, &layout);
        }
        Command::Retrieve(args) => retrieve(cfg, &layout, args)?,
        Command::Rerank(args) => {
            apply_rerank_args(&mut cfg, args)?;
            cfg.validate()?;
            announce(&stage_rerank(&cfg, &layout)?, &layout);
        }
        Command::Evaluate(args) => {
            cfg.evaluate.k = args.k.unwrap_or(cfg.evaluate.k);
            cfg.evaluate.embeddings = args.embeddings.or(cfg.evaluate.embeddings);
            cfg.evaluate.popularity = args.popularity.or(cfg.evaluate.popularity);
            cfg.validate()?;
            let (m, report) = stage_evaluate(&cfg, &layout, args.force)?;
            print!("{}", report.to_table());
            announce(&m, &layout);
        }
        Command::Replay { log, force } => {
            cfg.ranker.kind = RankerChoice::Replay;
            cfg.ranker.replay = Some(log);
            cfg.validate()?;
            announce(&stage_rerank(&cfg, &layout)?, &layout);
            let (m, report) = stage_evaluate(&cfg, &layout, force)?;
            print!("{}", report.to_table());
            announce(&m, &layout);
        }
        Command::Synth(args) => {
            let spec = SyntheticSpec {
                n_sources: args.sources,
                n_docs: args.docs,
                vocab_size: args.vocab,
                n_topics: args.topics,
                popularity_skew: args.skew,
                off_topic_weight: args.off_topic,
                embedding_dim: args.dim,
                seed: cfg.seed,
                ..SyntheticSpec::default()
            };
            let dir = args.dir.unwrap_or_else(|| cfg.out_dir.join("synthetic"));
            let m = stage_synth(&spec, &dir)?;
            let files: Vec<&str> = m.outputs.keys().map(String::as_str).collect();
            println!("synth: wrote {} in {}", files.join(", "), dir.display());
        }
        Command::Run => {
            let report = run_all(&cfg, &layout)?;
            print!("{}", report.to_table());
            println!("artifacts in {}", layout.root().display());
        }
    }
    Ok(())
}

fn apply_rerank_args(cfg: &mut PipelineConfig, args: RerankArgs) -> Result<(), PipelineError> {
    if let Some(path) = &args.filter_config {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        cfg.filter = FilterConfig::from_toml(&text)?;
    }
    if let Some(r) = args.ranker {
        cfg.ranker.kind = match r {
            RankerArg::Endpoint => RankerChoice::Endpoint,
            RankerArg::Identity | RankerArg::Mock => RankerChoice::Identity,
            RankerArg::Oracle => RankerChoice::Oracle,
            RankerArg::Noisy => RankerChoice::Noisy,
            RankerArg::Replay => RankerChoice::Replay,
        };
    } else if args.replay.is_some() {
        cfg.ranker.kind = RankerChoice::Replay;
    }
    cfg.ranker.replay = args.replay.or(cfg.ranker.replay.take());
    cfg.ranker.record = args.record.or(cfg.ranker.record.take());
    cfg.ranker.error_rate = args.error_rate.unwrap_or(cfg.ranker.error_rate);
    if let Some(b) = args.bias {
        cfg.ranker.bias = match b {
            BiasArg::Uniform => BiasChoice::Uniform,
            BiasArg::Popularity => BiasChoice::Popularity,
        };
    }
    Ok(())
}

fn retrieve(mut cfg: PipelineConfig, layout: &Layout, args: RetrieveArgs) -> Result<(), PipelineError> {
    if let Some(m) = args.model {
        cfg.retrieval.model = match m {
            ModelArg::Cer => RetrievalModel::CandidateBased,
            ModelArg::Der => RetrievalModel::DocumentBased,
        };
    }
    if let Some(a) = args.association {
        cfg.retrieval.association = match a {
            AssociationArg::Uniform => Association::Uniform,
            AssociationArg::Boolean => Association::Boolean,
        };
    }
    cfg.retrieval.top_n = args.top.unwrap_or(cfg.retrieval.top_n);
    cfg.validate()?;
    let Some(text) = args.query else {
        announce(&stage_retrieve(&cfg, layout)?, layout);
        return Ok(());
    };
    let path = args.index.unwrap_or_else(|| layout.index());
    let index = load_index(&path)?;
    let query = index.query(&text);
    let ranked = Scorer::new(&index, cfg.retrieval.association).rank_sources(&query, cfg.retrieval.model, cfg.retrieval.top_n)?;
    // a zero-probability source prints a null score
    for (rank, item) in ranked.items().iter().enumerate() {
        let line = serde_json::json!({
            "rank": rank + 1,
            "source": item.source.as_str(),
            "name": index.display_name(&item.source).unwrap_or(item.source.as_str()),
            "log_score": item.score.filter(|s| s.is_finite()),
        });
        println!("{line}");
    }
    Ok(())
}

fn load_index(path: &Path) -> Result<Index, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Artifact {
            message: format!("{} not found", path.display()),
            hint: "run `sourcerank index` first or pass --index".into(),
        });
    }
    Ok(Index::load(path)?)
}
