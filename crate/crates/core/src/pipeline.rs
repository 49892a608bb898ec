//! Stage orchestration: ingest → split → index → retrieve → rerank → evaluate.
//!
//! Every stage writes its artifacts under `<out>/<stage>/` together with a
//! `manifest.json` recording the tool version, a digest of the settings,
//! the seed and SHA-256 digests of inputs and outputs. Manifests hold no
//! timestamps or absolute paths, so identical runs give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusError, IngestOptions, Lexicon, Sample, SourceId};
use crate::index::{build_index, Association, Index, IndexError, TokenizerConfig};
use crate::metrics::{self, EmbeddingTable, EvalTables, GoldSet, MetricsError, MetricsReport, PopularityTable, Rankings};
use crate::mlrf::{self, FilterConfig, FilterError, RerankContext, RunTrace};
use crate::reranker::{
    ChatConfig, ChatRanker, ChatTransport, Exemplar, HttpTransport, IdentityRanker, NoiseBias, NoisyOracleRanker,
    OracleRanker, Ranker, RecordingTransport, RelevanceTable, RerankError, ReplayTransport,
};
use crate::retrieval::{RankedItem, RankedList, RetrievalError, RetrievalModel, Scorer};
use crate::synth::{self, QueryRecord, SynthError, SyntheticSpec};

pub const TOOL: &str = "sourcerank";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{message}\nhint: {hint}")]
    Artifact { message: String, hint: String },
    #[error("endpoint failure: {0}")]
    Endpoint(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status: 1 for user errors, 2 for internal ones, 3 when
    /// the ranking endpoint could not be reached.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Endpoint(_) => 3,
            PipelineError::Internal(_) => 2,
            _ => 1,
        }
    }
}

impl From<RerankError> for PipelineError {
    fn from(e: RerankError) -> Self {
        match e {
            RerankError::Endpoint { .. } | RerankError::NotConfigured(_) => PipelineError::Endpoint(e.to_string()),
            other => PipelineError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn internal<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Sources quoted fewer times are dropped, repeatedly, until stable.
    pub min_count: usize,
    pub max_malformed_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: None,
            lexicon: None,
            min_count: 1,
            max_malformed_fraction: IngestOptions::default().max_malformed_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_test: usize,
    pub n_valid: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n_test: 100, n_valid: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub model: RetrievalModel,
    pub top_n: usize,
    pub association: Association,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            model: RetrievalModel::DocumentBased,
            top_n: 100,
            association: Association::Uniform,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankerChoice {
    #[default]
    #[serde(alias = "mock")]
    Identity,
    Oracle,
    Noisy,
    Endpoint,
    Replay,
}

impl std::str::FromStr for RankerChoice {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" | "mock" => Ok(RankerChoice::Identity),
            "oracle" => Ok(RankerChoice::Oracle),
            "noisy" => Ok(RankerChoice::Noisy),
            "endpoint" => Ok(RankerChoice::Endpoint),
            "replay" => Ok(RankerChoice::Replay),
            other => Err(PipelineError::Config(format!("unknown ranker {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasChoice {
    Uniform,
    #[default]
    Popularity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub kind: RankerChoice,
    /// Noisy ranker only.
    pub error_rate: f64,
    pub bias: BiasChoice,
    /// Replay log read by the `replay` ranker.
    pub replay: Option<PathBuf>,
    /// Replay log written by the `endpoint` ranker.
    pub record: Option<PathBuf>,
    pub chat: ChatConfig,
    pub exemplar: Option<Exemplar>,
    /// Oracle rankers: relevance given to non-gold sources that share the
    /// query's category. Zero keeps the table binary.
    pub topical_relevance: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            kind: RankerChoice::Identity,
            error_rate: 0.2,
            bias: BiasChoice::Popularity,
            replay: None,
            record: None,
            chat: ChatConfig::default(),
            exemplar: None,
            topical_relevance: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub k: Vec<usize>,
    pub embeddings: Option<PathBuf>,
    /// CSV of `source,count`; defaults to counts from the index.
    pub popularity: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            k: vec![20],
            embeddings: None,
            popularity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives the filter shuffles and the noisy ranker.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    pub tokenizer: TokenizerConfig,
    pub retrieval: RetrievalConfig,
    pub filter: FilterConfig,
    pub ranker: RankerConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            split: SplitConfig::default(),
            tokenizer: TokenizerConfig::default(),
            retrieval: RetrievalConfig::default(),
            filter: FilterConfig::default(),
            ranker: RankerConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

fn file_name_only(p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        *path = path.file_name().map(PathBuf::from).unwrap_or_default();
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.corpus.path,
            &mut cfg.corpus.lexicon,
            &mut cfg.ranker.replay,
            &mut cfg.ranker.record,
            &mut cfg.evaluate.embeddings,
            &mut cfg.evaluate.popularity,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            seed: self.seed,
            ..self.filter.clone()
        }
    }

    /// Digest of the settings, ignoring where files live. Input contents are
    /// digested separately in each manifest.
    pub fn digest(&self) -> String {
        self.stage_digest("evaluate")
    }

    /// Digest of the settings a stage and everything upstream of it depend
    /// on, so later-stage settings can change without invalidating earlier
    /// artifacts.
    pub fn stage_digest(&self, stage: &str) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        for p in [
            &mut c.corpus.path,
            &mut c.corpus.lexicon,
            &mut c.ranker.replay,
            &mut c.ranker.record,
            &mut c.evaluate.embeddings,
            &mut c.evaluate.popularity,
        ] {
            file_name_only(p);
        }
        let depth = STAGES.iter().position(|s| *s == stage).unwrap_or(STAGES.len() - 1);
        let first_used = |key: &str| match key {
            "corpus" => 0,
            "seed" | "split" => 1,
            "tokenizer" => 2,
            "retrieval" => 3,
            "filter" | "ranker" => 4,
            _ => 5,
        };
        let mut value = serde_json::to_value(&c).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.retain(|k, _| first_used(k) <= depth);
        }
        let bytes = serde_json::to_vec(&value).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (what, p) in [
            ("corpus.path", &self.corpus.path),
            ("corpus.lexicon", &self.corpus.lexicon),
            ("evaluate.embeddings", &self.evaluate.embeddings),
            ("evaluate.popularity", &self.evaluate.popularity),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{what}: {} does not exist", p.display()));
                }
            }
        }
        if self.corpus.min_count == 0 {
            return bad("corpus.min_count must be at least 1".into());
        }
        if self.split.n_test == 0 {
            return bad("split.n_test must be at least 1".into());
        }
        if self.retrieval.top_n == 0 {
            return bad("retrieval.top_n must be at least 1".into());
        }
        if self.evaluate.k.is_empty() || self.evaluate.k.contains(&0) {
            return bad("evaluate.k must list positive cutoffs".into());
        }
        if !(0.0..=1.0).contains(&self.ranker.error_rate) {
            return bad("ranker.error_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.ranker.topical_relevance) {
            return bad("ranker.topical_relevance must lie in [0, 1]".into());
        }
        if self.ranker.kind == RankerChoice::Replay {
            match &self.ranker.replay {
                Some(p) if p.is_file() => {}
                Some(p) => return bad(format!("ranker.replay: {} does not exist", p.display())),
                None => return bad("ranker kind \"replay\" needs ranker.replay".into()),
            }
        }
        self.filter.validate()?;
        Ok(())
    }
}

// ------------------------------------------------------- in-memory stages

/// One query per test article: articles are grouped by title, the query id
/// is the smallest sample id in the group and the gold set is every source
/// quoted in it.
pub fn queries_from_test(test: &[Sample]) -> Result<(Vec<QueryRecord>, GoldSet), PipelineError> {
    let mut groups: BTreeMap<&str, (String, BTreeSet<SourceId>, BTreeSet<String>)> = BTreeMap::new();
    for s in test {
        let entry = groups
            .entry(s.title.as_str())
            .or_insert_with(|| (s.id.clone(), BTreeSet::new(), BTreeSet::new()));
        if s.id < entry.0 {
            entry.0 = s.id.clone();
        }
        entry.1.insert(s.source()?);
        entry.2.extend(s.categories.iter().cloned());
    }
    let mut queries = Vec::with_capacity(groups.len());
    let mut gold = GoldSet::default();
    for (title, (id, sources, categories)) in groups {
        gold.insert(id.clone(), sources)?;
        queries.push(QueryRecord {
            query_id: id,
            query: title.to_string(),
            categories: categories.into_iter().collect(),
        });
    }
    queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok((queries, gold))
}

/// Each source's most frequent category over its samples; ties go to the
/// smallest name.
pub fn dominant_categories(samples: &[Sample]) -> Result<BTreeMap<SourceId, String>, PipelineError> {
    let mut counts: BTreeMap<SourceId, BTreeMap<&str, usize>> = BTreeMap::new();
    for s in samples {
        let per = counts.entry(s.source()?).or_default();
        for c in &s.categories {
            *per.entry(c.as_str()).or_default() += 1;
        }
    }
    Ok(counts
        .into_iter()
        .filter_map(|(source, per)| {
            let best = per.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?;
            Some((source, best.0.to_string()))
        })
        .collect())
}

/// Gold sources score 1; other sources whose dominant category matches one
/// of the query's categories score `topical`.
pub fn oracle_relevance(
    gold: &BTreeSet<SourceId>,
    query_categories: &[String],
    dominant: &BTreeMap<SourceId, String>,
    topical: f64,
) -> RelevanceTable {
    let mut table = gold_relevance(gold);
    if topical > 0.0 {
        for (source, category) in dominant {
            if query_categories.contains(category) {
                table.entry(source.clone()).or_insert(topical);
            }
        }
    }
    table
}

pub fn retrieve_queries(
    index: &Index,
    queries: &[QueryRecord],
    config: &RetrievalConfig,
) -> Result<Vec<(String, RankedList)>, PipelineError> {
    let scorer = Scorer::new(index, config.association);
    queries
        .par_iter()
        .map(|q| {
            let query = index.query(&q.query);
            Ok((q.query_id.clone(), scorer.rank_sources(&query, config.model, config.top_n)?))
        })
        .collect()
}

pub fn gold_relevance(gold: &BTreeSet<SourceId>) -> RelevanceTable {
    gold.iter().map(|s| (s.clone(), 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankOutcome {
    pub query_id: String,
    pub trace: RunTrace,
    pub most_frequent: RankedList,
    pub layer_weighted: Option<RankedList>,
}

/// Runs the filter over each query's retrieved candidates. `ranker_for`
/// supplies the ranker for a query, which lets oracle rankers see gold.
pub fn rerank_queries<'a, F>(
    index: &Index,
    queries: &[QueryRecord],
    retrieved: &BTreeMap<String, RankedList>,
    config: &FilterConfig,
    exemplar: &Exemplar,
    ranker_for: F,
) -> Result<Vec<RerankOutcome>, PipelineError>
where
    F: Fn(&QueryRecord) -> Box<dyn Ranker + 'a> + Sync,
{
    config.validate()?;
    let weighted = config.layer_weights.len() == config.layers.len();
    queries
        .par_iter()
        .map(|q| {
            let candidates = retrieved.get(&q.query_id).map(RankedList::to_sources).unwrap_or_default();
            if candidates.is_empty() {
                return Ok(RerankOutcome {
                    query_id: q.query_id.clone(),
                    trace: RunTrace {
                        layers: config.layers.clone(),
                        repetitions: vec![],
                    },
                    most_frequent: RankedList::default(),
                    layer_weighted: weighted.then(RankedList::default),
                });
            }
            let ctx = RerankContext {
                query: &q.query,
                names: index.display_names(),
                exemplar,
            };
            let ranker = ranker_for(q);
            let trace = mlrf::run_filter(&candidates, config, ranker.as_ref(), &ctx)?;
            let most_frequent = mlrf::aggregate_most_frequent(&trace, config.output_k);
            let layer_weighted = if weighted {
                Some(mlrf::aggregate_layer_weighted(&trace, &config.layer_weights, config.output_k)?)
            } else {
                None
            };
            Ok(RerankOutcome {
                query_id: q.query_id.clone(),
                trace,
                most_frequent,
                layer_weighted,
            })
        })
        .collect()
}

pub fn to_rankings<'a>(lists: impl IntoIterator<Item = (&'a String, &'a RankedList)>) -> Rankings {
    lists.into_iter().map(|(q, l)| (q.clone(), l.to_sources())).collect()
}

// ------------------------------------------------------------- manifests

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
            message: format!("{}: unreadable manifest: {e}", path.display()),
            hint: "rerun the stage that produced it".into(),
        })
    }
}

/// Artifact locations under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

pub const STAGES: [&str; 6] = ["ingest", "split", "index", "retrieve", "rerank", "evaluate"];

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn samples(&self) -> PathBuf {
        self.path("ingest/samples.jsonl")
    }
    pub fn train(&self) -> PathBuf {
        self.path("split/train.jsonl")
    }
    pub fn queries(&self) -> PathBuf {
        self.path("split/queries.jsonl")
    }
    pub fn gold(&self) -> PathBuf {
        self.path("split/gold.jsonl")
    }
    pub fn index(&self) -> PathBuf {
        self.path("index/index.bin")
    }
    pub fn retrieval(&self) -> PathBuf {
        self.path("retrieve/retrieval.jsonl")
    }
    pub fn reranked(&self) -> PathBuf {
        self.path("rerank/mrf.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.path("evaluate/report.txt")
    }
    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join(MANIFEST_FILE)
    }
}

struct StageWriter<'a> {
    layout: &'a Layout,
    cfg: &'a PipelineConfig,
    stage: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> StageWriter<'a> {
    fn new(layout: &'a Layout, cfg: &'a PipelineConfig, stage: &'static str) -> Result<Self, PipelineError> {
        let dir = layout.root.join(stage);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(StageWriter {
            layout,
            cfg,
            stage,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<(), PipelineError> {
        if !path.is_file() {
            return Err(missing(path));
        }
        self.inputs.insert(name.to_string(), file_digest(path)?);
        Ok(())
    }

    fn output(&mut self, file: &str) -> PathBuf {
        self.outputs.push(file.to_string());
        self.layout.root.join(self.stage).join(file)
    }

    fn finish(self) -> Result<Manifest, PipelineError> {
        let dir = self.layout.root.join(self.stage);
        let mut outputs = BTreeMap::new();
        for f in &self.outputs {
            outputs.insert(f.clone(), file_digest(&dir.join(f))?);
        }
        let manifest = Manifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            stage: self.stage.into(),
            config_digest: self.cfg.stage_digest(self.stage),
            seed: self.cfg.seed,
            inputs: self.inputs,
            outputs,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(internal)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

fn missing(path: &Path) -> PipelineError {
    let stage = path
        .parent()
        .and_then(Path::file_name)
        .and_then(|s| s.to_str())
        .filter(|s| STAGES.contains(s));
    PipelineError::Artifact {
        message: format!("{} is missing", path.display()),
        hint: match stage {
            Some(s) => format!("run `{TOOL} {s}` first"),
            None => "check the path".into(),
        },
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, &row).map_err(internal)?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    if !path.is_file() {
        return Err(missing(path));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Artifact {
                message: format!("{}:{}: {e}", path.display(), i + 1),
                hint: "regenerate the file with the matching stage".into(),
            })
        })
        .collect()
}

fn read_samples(path: &Path) -> Result<Vec<Sample>, PipelineError> {
    read_jsonl(path)
}

// ------------------------------------------------------------ file stages

pub fn stage_ingest(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest, PipelineError> {
    let corpus_path = cfg
        .corpus
        .path
        .as_deref()
        .ok_or_else(|| PipelineError::Config("corpus.path is not set".into()))?;
    let mut w = StageWriter::new(layout, cfg, "ingest")?;
    w.input("corpus", corpus_path)?;
    if let Some(lex) = &cfg.corpus.lexicon {
        Lexicon::load(lex)?;
        w.input("lexicon", lex)?;
    }
    let options = IngestOptions {
        max_malformed_fraction: cfg.corpus.max_malformed_fraction,
        ..IngestOptions::default()
    };
    let report = corpus::ingest_with(corpus_path, &options)?;
    let samples = corpus::enforce_min_frequency(report.samples, cfg.corpus.min_count)?;
    let samples_path = w.output("samples.jsonl");
    corpus::write_samples(&samples_path, &samples).map_err(io_err(&samples_path))?;
    let errors_path = w.output("errors.jsonl");
    write_jsonl(&errors_path, &report.errors)?;
    w.finish()
}

pub fn stage_split(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest, PipelineError> {
    let mut w = StageWriter::new(layout, cfg, "split")?;
    w.input("samples", &layout.samples())?;
    let samples = read_samples(&layout.samples())?;
    let split = corpus::temporal_split(samples, cfg.split.n_test, cfg.split.n_valid)?;
    let (queries, gold) = queries_from_test(&split.test)?;
    for (name, part) in [("train.jsonl", &split.train), ("valid.jsonl", &split.valid), ("test.jsonl", &split.test)] {
        let p = w.output(name);
        corpus::write_samples(&p, part).map_err(io_err(&p))?;
    }
    let p = w.output("queries.jsonl");
    synth::write_queries(&p, &queries).map_err(io_err(&p))?;
    let p = w.output("gold.jsonl");
    gold.write(&p)?;
    w.finish()
}

pub fn stage_index(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest, PipelineError> {
    let mut w = StageWriter::new(layout, cfg, "index")?;
    w.input("train", &layout.train())?;
    let index = build_index(&read_samples(&layout.train())?, &cfg.tokenizer)?;
    let p = w.output("index.bin");
    index.save(&p)?;
    w.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalLine {
    pub query_id: String,
    pub rank: usize,
    pub source: SourceId,
    #[serde(with = "crate::retrieval::log_score_serde")]
    pub log_score: f64,
}

fn retrieval_lines(results: &[(String, RankedList)]) -> Vec<RetrievalLine> {
    results
        .iter()
        .flat_map(|(q, list)| {
            list.items().iter().enumerate().map(move |(i, item)| RetrievalLine {
                query_id: q.clone(),
                rank: i + 1,
                source: item.source.clone(),
                log_score: item.score.unwrap_or(f64::NEG_INFINITY),
            })
        })
        .collect()
}

pub fn read_retrieval(path: &Path) -> Result<BTreeMap<String, RankedList>, PipelineError> {
    let mut grouped: BTreeMap<String, Vec<RetrievalLine>> = BTreeMap::new();
    for line in read_jsonl::<RetrievalLine>(path)? {
        grouped.entry(line.query_id.clone()).or_default().push(line);
    }
    grouped
        .into_iter()
        .map(|(q, mut lines)| {
            lines.sort_by_key(|l| l.rank);
            let items = lines
                .into_iter()
                .map(|l| RankedItem {
                    source: l.source,
                    score: Some(l.log_score),
                })
                .collect();
            Ok((q, RankedList::from_items(items)?))
        })
        .collect()
}

pub fn stage_retrieve(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest, PipelineError> {
    let mut w = StageWriter::new(layout, cfg, "retrieve")?;
    w.input("index", &layout.index())?;
    w.input("queries", &layout.queries())?;
    let index = load_index(&layout.index())?;
    let queries = load_queries(&layout.queries())?;
    let results = retrieve_queries(&index, &queries, &cfg.retrieval)?;
    let p = w.output("retrieval.jsonl");
    write_jsonl(&p, retrieval_lines(&results))?;
    w.finish()
}

fn load_index(path: &Path) -> Result<Index, PipelineError> {
    if !path.is_file() {
        return Err(missing(path));
    }
    Ok(Index::load(path)?)
}

fn load_queries(path: &Path) -> Result<Vec<QueryRecord>, PipelineError> {
    read_jsonl(path)
}

fn load_gold(path: &Path) -> Result<GoldSet, PipelineError> {
    if !path.is_file() {
        return Err(missing(path));
    }
    Ok(GoldSet::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    pub query_id: String,
    pub most_frequent: RankedList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_weighted: Option<RankedList>,
    pub groups: usize,
    pub repaired: usize,
    pub fallbacks: usize,
}

/// Builds the chat ranker for the `endpoint` and `replay` choices.
pub fn chat_ranker(cfg: &RankerConfig) -> Result<ChatRanker, PipelineError> {
    let transport: Box<dyn ChatTransport> = match cfg.kind {
        RankerChoice::Replay => {
            let path = cfg
                .replay
                .as_deref()
                .ok_or_else(|| PipelineError::Config("ranker kind \"replay\" needs ranker.replay".into()))?;
            Box::new(ReplayTransport::load(path).map_err(io_err(path))?)
        }
        RankerChoice::Endpoint => {
            let http = HttpTransport::from_env(std::time::Duration::from_secs(cfg.chat.timeout_secs))?;
            match &cfg.record {
                Some(path) => Box::new(RecordingTransport::create(http, path).map_err(io_err(path))?),
                None => Box::new(http),
            }
        }
        _ => return Err(PipelineError::Internal("not a chat ranker".into())),
    };
    Ok(ChatRanker::new(transport, cfg.chat.clone()))
}

pub fn stage_rerank(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest, PipelineError> {
    let mut w = StageWriter::new(layout, cfg, "rerank")?;
    w.input("index", &layout.index())?;
    w.input("queries", &layout.queries())?;
    w.input("gold", &layout.gold())?;
    w.input("retrieval", &layout.retrieval())?;
    let topical = cfg.ranker.topical_relevance > 0.0
        && matches!(cfg.ranker.kind, RankerChoice::Oracle | RankerChoice::Noisy);
    if topical {
        w.input("train", &layout.train())?;
    }
    if let (RankerChoice::Replay, Some(p)) = (cfg.ranker.kind, &cfg.ranker.replay) {
        w.input("replay", p)?;
    }
    let index = load_index(&layout.index())?;
    let queries = load_queries(&layout.queries())?;
    let gold = load_gold(&layout.gold())?;
    let retrieved = read_retrieval(&layout.retrieval())?;
    let exemplar = cfg.ranker.exemplar.clone().unwrap_or_default();
    let filter = cfg.filter_config();

    let chat = match cfg.ranker.kind {
        RankerChoice::Endpoint | RankerChoice::Replay => Some(chat_ranker(&cfg.ranker)?),
        _ => None,
    };
    let popularity = index.popularity();
    let dominant = if topical {
        dominant_categories(&read_jsonl::<Sample>(&layout.train())?)?
    } else {
        BTreeMap::new()
    };
    let outcomes = rerank_queries(&index, &queries, &retrieved, &filter, &exemplar, |q| -> Box<dyn Ranker + '_> {
        let relevance = || {
            let empty = BTreeSet::new();
            let g = gold.get(&q.query_id).unwrap_or(&empty);
            oracle_relevance(g, &q.categories, &dominant, cfg.ranker.topical_relevance)
        };
        match (&chat, cfg.ranker.kind) {
            (Some(c), _) => Box::new(c),
            (None, RankerChoice::Oracle) => Box::new(OracleRanker { relevance: relevance() }),
            (None, RankerChoice::Noisy) => Box::new(NoisyOracleRanker {
                relevance: relevance(),
                error_rate: cfg.ranker.error_rate,
                seed: cfg.seed,
                bias: match cfg.ranker.bias {
                    BiasChoice::Uniform => NoiseBias::Uniform,
                    BiasChoice::Popularity => NoiseBias::Popularity(popularity.clone()),
                },
            }),
            (None, _) => Box::new(IdentityRanker),
        }
    })?;

    if chat.is_some() {
        let groups: usize = outcomes.iter().map(|o| o.trace.group_count()).sum();
        let failed: usize = outcomes.iter().map(|o| o.trace.fallback_count()).sum();
        if groups > 0 && failed == groups {
            let first = outcomes
                .iter()
                .flat_map(|o| o.trace.repetitions.iter())
                .flat_map(|r| r.layers.iter())
                .flat_map(|l| l.groups.iter())
                .find_map(|g| g.fallback.clone())
                .unwrap_or_default();
            return Err(PipelineError::Endpoint(format!("every ranking request failed; first error: {first}")));
        }
    }

    let p = w.output("mrf.jsonl");
    write_jsonl(
        &p,
        outcomes.iter().map(|o| RerankRecord {
            query_id: o.query_id.clone(),
            most_frequent: o.most_frequent.clone(),
            layer_weighted: o.layer_weighted.clone(),
            groups: o.trace.group_count(),
            repaired: o.trace.repaired_count(),
            fallbacks: o.trace.fallback_count(),
        }),
    )?;
    let p = w.output("trace.jsonl");
    let file = File::create(&p).map_err(io_err(&p))?;
    let mut out = BufWriter::new(file);
    for o in &outcomes {
        o.trace.write_jsonl(&o.query_id, &mut out).map_err(io_err(&p))?;
    }
    out.flush().map_err(io_err(&p))?;
    w.finish()
}

/// Checks that upstream manifests agree with the current settings and that
/// their recorded outputs are still the files on disk.
pub fn verify_upstream(cfg: &PipelineConfig, layout: &Layout, stages: &[&str]) -> Result<(), PipelineError> {
    for stage in stages {
        let digest = cfg.stage_digest(stage);
        let path = layout.manifest(stage);
        if !path.is_file() {
            return Err(missing(&path));
        }
        let m = Manifest::load(&path)?;
        let rerun = |why: String| PipelineError::Artifact {
            message: format!("{stage}: {why}"),
            hint: format!("rerun `{TOOL} {stage}` with the current config, or pass --force"),
        };
        if m.version != VERSION {
            return Err(rerun(format!("written by version {}, this is {VERSION}", m.version)));
        }
        if m.config_digest != digest {
            return Err(rerun("config digest differs from the current config".into()));
        }
        if m.seed != cfg.seed {
            return Err(rerun(format!("seed {} differs from {}", m.seed, cfg.seed)));
        }
        for (file, recorded) in &m.outputs {
            let actual = file_digest(&layout.root.join(stage).join(file))?;
            if &actual != recorded {
                return Err(rerun(format!("{file} changed since it was written")));
            }
        }
    }
    Ok(())
}

pub fn stage_evaluate(cfg: &PipelineConfig, layout: &Layout, force: bool) -> Result<(Manifest, MetricsReport), PipelineError> {
    if !force {
        verify_upstream(cfg, layout, &["split", "index", "retrieve", "rerank"])?;
    }
    let mut w = StageWriter::new(layout, cfg, "evaluate")?;
    w.input("index", &layout.index())?;
    w.input("gold", &layout.gold())?;
    w.input("retrieval", &layout.retrieval())?;
    w.input("mrf", &layout.reranked())?;
    if let Some(p) = &cfg.evaluate.embeddings {
        w.input("embeddings", p)?;
    }
    if let Some(p) = &cfg.evaluate.popularity {
        w.input("popularity", p)?;
    }
    let index = load_index(&layout.index())?;
    let gold = load_gold(&layout.gold())?;
    let retrieved = read_retrieval(&layout.retrieval())?;
    let reranked: Vec<RerankRecord> = read_jsonl(&layout.reranked())?;

    let mut tables = EvalTables::from_index(&index, None);
    if let Some(p) = &cfg.evaluate.embeddings {
        tables.embeddings = Some(EmbeddingTable::load(p)?);
    }
    if let Some(p) = &cfg.evaluate.popularity {
        tables.popularity = PopularityTable::load_csv(p)?;
    }
    let mut systems = vec![(cfg.retrieval.model.to_string().to_uppercase(), to_rankings(&retrieved))];
    systems.push((
        "MRF".to_string(),
        reranked.iter().map(|r| (r.query_id.clone(), r.most_frequent.to_sources())).collect(),
    ));
    if reranked.iter().all(|r| r.layer_weighted.is_some()) && !reranked.is_empty() {
        systems.push((
            "MRF-weighted".to_string(),
            reranked
                .iter()
                .map(|r| (r.query_id.clone(), r.layer_weighted.as_ref().map(RankedList::to_sources).unwrap_or_default()))
                .collect(),
        ));
    }
    let report = metrics::evaluate(&systems, &gold, &tables, &cfg.evaluate.k)?;
    let p = w.output("report.txt");
    std::fs::write(&p, report.to_table()).map_err(io_err(&p))?;
    let p = w.output("report.csv");
    report.write_csv(&p)?;
    let p = w.output("per_query.csv");
    report.write_per_query_csv(&p)?;
    Ok((w.finish()?, report))
}

/// Every stage in order; returns the evaluation report.
pub fn run_all(cfg: &PipelineConfig, layout: &Layout) -> Result<MetricsReport, PipelineError> {
    cfg.validate()?;
    stage_ingest(cfg, layout)?;
    stage_split(cfg, layout)?;
    stage_index(cfg, layout)?;
    stage_retrieve(cfg, layout)?;
    stage_rerank(cfg, layout)?;
    Ok(stage_evaluate(cfg, layout, false)?.1)
}

/// Writes a synthetic corpus and its manifest into `dir`.
pub fn stage_synth(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest, PipelineError> {
    let corpus = synth::generate(spec)?;
    corpus.write_to(dir)?;
    let mut outputs = BTreeMap::new();
    for f in [
        synth::CORPUS_FILE,
        synth::GOLD_FILE,
        synth::QUERIES_FILE,
        synth::EMBEDDINGS_FILE,
        synth::POPULARITY_FILE,
    ] {
        outputs.insert(f.to_string(), file_digest(&dir.join(f))?);
    }
    let spec_bytes = serde_json::to_vec(spec).map_err(internal)?;
    let manifest = Manifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        stage: "synth".into(),
        config_digest: hex::encode(Sha256::digest(spec_bytes)),
        seed: spec.seed,
        inputs: BTreeMap::new(),
        outputs,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(internal)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}
