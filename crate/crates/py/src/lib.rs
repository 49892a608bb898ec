//! Python bindings for sourcerank.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyConnectionError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sourcerank::corpus::{ingest, SourceId};
use sourcerank::index::{build_index, Association, TokenizerConfig};
use sourcerank::mlrf::{aggregate, run_filter, FilterConfig, LayerSpec, RerankContext, Strategy};
use sourcerank::pipeline::{run_all, Layout, PipelineConfig, PipelineError};
use sourcerank::reranker::{
    parse_ranking as parse_raw, Candidate, Exemplar, IdentityRanker, NoiseBias, NoisyOracleRanker, OracleRanker,
    Ranker, RerankRequest, DEFAULT_GROUP_SIZE,
};
use sourcerank::retrieval::{RetrievalModel, Scorer};
use sourcerank::synth::{generate, SyntheticSpec};
use sourcerank::{metrics, synth};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Endpoint(_) => PyConnectionError::new_err(e.to_string()),
        PipelineError::Internal(_) => PyRuntimeError::new_err(e.to_string()),
        PipelineError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn source_id(s: &str) -> PyResult<SourceId> {
    SourceId::new(s).map_err(value_err)
}

fn source_ids(items: &[String]) -> PyResult<Vec<SourceId>> {
    items.iter().map(|s| source_id(s)).collect()
}

fn gold_set(items: &[String]) -> PyResult<BTreeSet<SourceId>> {
    items.iter().map(|s| source_id(s)).collect()
}

fn model(name: &str) -> PyResult<RetrievalModel> {
    name.parse().map_err(value_err)
}

fn association(name: &str) -> PyResult<Association> {
    match name {
        "uniform" => Ok(Association::Uniform),
        "boolean" => Ok(Association::Boolean),
        other => Err(PyValueError::new_err(format!("unknown association {other:?}; expected uniform or boolean"))),
    }
}

fn strings(ids: impl IntoIterator<Item = SourceId>) -> Vec<String> {
    ids.into_iter().map(|s| s.as_str().to_string()).collect()
}

#[pymodule(name = "sourcerank_py")]
pub mod sourcerank_py {
    use super::*;

    /// Term statistics and source-document associations of a training split.
    #[pyclass(frozen)]
    struct Index {
        inner: sourcerank::index::Index,
    }

    #[pymethods]
    impl Index {
        /// Builds an index from a JSONL sample file.
        #[staticmethod]
        #[pyo3(signature = (corpus, stem=false, remove_stopwords=false))]
        fn build(corpus: PathBuf, stem: bool, remove_stopwords: bool) -> PyResult<Self> {
            let report = ingest(&corpus).map_err(value_err)?;
            let cfg = TokenizerConfig { remove_stopwords, stem };
            let inner = build_index(&report.samples, &cfg).map_err(value_err)?;
            Ok(Index { inner })
        }

        /// Loads an index snapshot written by `save` or the index stage.
        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            let inner = sourcerank::index::Index::load(&path).map_err(value_err)?;
            Ok(Index { inner })
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            self.inner.save(&path).map_err(value_err)
        }

        #[getter]
        fn n_sources(&self) -> usize {
            self.inner.n_sources()
        }

        #[getter]
        fn n_docs(&self) -> usize {
            self.inner.doc_count()
        }

        fn sources(&self) -> Vec<String> {
            strings(self.inner.sources().cloned())
        }

        fn display_name(&self, source: &str) -> PyResult<Option<String>> {
            Ok(self.inner.display_name(&source_id(source)?).map(str::to_string))
        }

        /// Training sample count per source.
        fn popularity(&self) -> BTreeMap<String, u64> {
            self.inner
                .popularity()
                .into_iter()
                .map(|(s, n)| (s.as_str().to_string(), n))
                .collect()
        }

        fn digest(&self) -> PyResult<String> {
            self.inner.digest().map_err(value_err)
        }

        /// Log-probability score of one source for a query.
        #[pyo3(signature = (query, source, model="der", association="uniform"))]
        fn score(&self, query: &str, source: &str, model: &str, association: &str) -> PyResult<f64> {
            let scorer = Scorer::new(&self.inner, super::association(association)?);
            scorer
                .score(super::model(model)?, &self.inner.query(query), &source_id(source)?)
                .map_err(value_err)
        }

        /// The top sources for a query as (source, log score) pairs.
        #[pyo3(signature = (query, model="der", top_n=100, association="uniform"))]
        fn retrieve(&self, query: &str, model: &str, top_n: usize, association: &str) -> PyResult<Vec<(String, f64)>> {
            let scorer = Scorer::new(&self.inner, super::association(association)?);
            let list = scorer
                .rank_sources(&self.inner.query(query), super::model(model)?, top_n)
                .map_err(value_err)?;
            Ok(list
                .items()
                .iter()
                .map(|i| (i.source.as_str().to_string(), i.score.unwrap_or(f64::NEG_INFINITY)))
                .collect())
        }

        fn __len__(&self) -> usize {
            self.inner.n_sources()
        }

        fn __repr__(&self) -> String {
            format!("Index(n_sources={}, n_docs={})", self.inner.n_sources(), self.inner.doc_count())
        }
    }

    /// Multi-layer reranking filter settings.
    #[pyclass(frozen)]
    struct Filter {
        config: FilterConfig,
    }

    #[pymethods]
    impl Filter {
        #[new]
        #[pyo3(signature = (layers=vec![(10, 5), (5, 2)], repetitions=20, output_k=20, strategy="most_frequent", layer_weights=None, seed=0))]
        fn new(
            layers: Vec<(usize, usize)>,
            repetitions: usize,
            output_k: usize,
            strategy: &str,
            layer_weights: Option<Vec<f64>>,
            seed: u64,
        ) -> PyResult<Self> {
            let strategy = match strategy {
                "most_frequent" => Strategy::MostFrequent,
                "layer_weighted" => Strategy::LayerWeighted,
                other => {
                    return Err(PyValueError::new_err(format!(
                        "unknown strategy {other:?}; expected most_frequent or layer_weighted"
                    )))
                }
            };
            let layers: Vec<LayerSpec> = layers.into_iter().map(|(g, k)| LayerSpec::new(g, k)).collect();
            let layer_weights = layer_weights.unwrap_or_else(|| {
                let n = layers.len() as f64;
                (1..=layers.len()).map(|i| i as f64 / (n * (n + 1.0) / 2.0)).collect()
            });
            let config = FilterConfig {
                layers,
                repetitions,
                strategy,
                layer_weights,
                output_k,
                seed,
                ..FilterConfig::default()
            };
            config.validate().map_err(value_err)?;
            Ok(Filter { config })
        }

        /// Filters retrieved candidates down to `output_k` sources.
        ///
        /// `ranker` is "identity", "oracle" or "noisy"; the oracle rankers
        /// order candidates by `relevance` (missing sources count as 0).
        #[pyo3(signature = (candidates, query, names=None, ranker="identity", relevance=None, error_rate=0.0))]
        fn run(
            &self,
            py: Python<'_>,
            candidates: Vec<String>,
            query: String,
            names: Option<BTreeMap<String, String>>,
            ranker: &str,
            relevance: Option<BTreeMap<String, f64>>,
            error_rate: f64,
        ) -> PyResult<Vec<String>> {
            let candidates = source_ids(&candidates)?;
            let names = names
                .unwrap_or_default()
                .into_iter()
                .map(|(s, n)| Ok((source_id(&s)?, n)))
                .collect::<PyResult<BTreeMap<_, _>>>()?;
            let relevance = relevance
                .unwrap_or_default()
                .into_iter()
                .map(|(s, r)| Ok((source_id(&s)?, r)))
                .collect::<PyResult<BTreeMap<_, _>>>()?;
            let ranker: Box<dyn Ranker> = match ranker {
                "identity" => Box::new(IdentityRanker),
                "oracle" => Box::new(OracleRanker { relevance }),
                "noisy" => Box::new(NoisyOracleRanker {
                    relevance,
                    error_rate,
                    seed: self.config.seed,
                    bias: NoiseBias::Uniform,
                }),
                other => {
                    return Err(PyValueError::new_err(format!(
                        "unknown ranker {other:?}; expected identity, oracle or noisy"
                    )))
                }
            };
            let config = &self.config;
            let ranked = py.detach(|| {
                let exemplar = Exemplar::default();
                let ctx = RerankContext {
                    query: &query,
                    names: &names,
                    exemplar: &exemplar,
                };
                let trace = run_filter(&candidates, config, ranker.as_ref(), &ctx).map_err(|e| e.to_string())?;
                aggregate(&trace, config).map_err(|e| e.to_string())
            });
            Ok(strings(ranked.map_err(PyValueError::new_err)?.to_sources()))
        }

        fn __repr__(&self) -> String {
            let layers: Vec<String> = self
                .config
                .layers
                .iter()
                .map(|l| format!("({}, {})", l.groups, l.keep_per_group))
                .collect();
            format!(
                "Filter(layers=[{}], repetitions={}, output_k={})",
                layers.join(", "),
                self.config.repetitions,
                self.config.output_k
            )
        }
    }

    /// Maps a raw listwise answer back to candidate ids, repairing
    /// missing, duplicated or unknown names. Returns (ranking, repaired).
    #[pyfunction]
    #[pyo3(signature = (raw, candidates, query=""))]
    fn parse_ranking(raw: &str, candidates: Vec<(String, String)>, query: &str) -> PyResult<(Vec<String>, bool)> {
        let candidates = candidates
            .into_iter()
            .map(|(s, name)| Ok(Candidate { source: source_id(&s)?, name }))
            .collect::<PyResult<Vec<_>>>()?;
        let limit = candidates.len().max(DEFAULT_GROUP_SIZE);
        let request = RerankRequest::new(query, candidates, Exemplar::default(), limit).map_err(value_err)?;
        let response = parse_raw(raw, &request);
        Ok((strings(response.ranking.to_sources()), response.repaired))
    }

    #[pyfunction]
    fn recall_at_k(ranking: Vec<String>, gold: Vec<String>, k: usize) -> PyResult<f64> {
        metrics::recall_at_k(&source_ids(&ranking)?, &gold_set(&gold)?, k).map_err(value_err)
    }

    #[pyfunction]
    #[pyo3(signature = (ranking, gold, k=None))]
    fn average_precision(ranking: Vec<String>, gold: Vec<String>, k: Option<usize>) -> PyResult<f64> {
        let (ranking, gold) = (source_ids(&ranking)?, gold_set(&gold)?);
        match k {
            Some(k) => metrics::average_precision_at_k(&ranking, &gold, k),
            None => metrics::average_precision(&ranking, &gold),
        }
        .map_err(value_err)
    }

    #[pyfunction]
    fn ndcg_at_k(ranking: Vec<String>, gold: Vec<String>, k: usize) -> PyResult<f64> {
        metrics::ndcg_at_k(&source_ids(&ranking)?, &gold_set(&gold)?, k).map_err(value_err)
    }

    /// Mean pairwise Euclidean distance of the embedded items of a ranking.
    /// Returns (score, items without an embedding).
    #[pyfunction]
    fn diversity(ranking: Vec<String>, embeddings: BTreeMap<String, Vec<f64>>) -> PyResult<(f64, usize)> {
        let dim = embeddings.values().next().map_or(0, Vec::len);
        let mut table = metrics::EmbeddingTable::new(dim);
        for (s, v) in embeddings {
            table.insert(&source_id(&s)?, v).map_err(value_err)?;
        }
        let d = metrics::diversity(&source_ids(&ranking)?, &table).map_err(value_err)?;
        Ok((d.value, d.excluded))
    }

    /// Writes a seeded synthetic corpus with planted gold into `dir`.
    #[pyfunction]
    #[pyo3(signature = (dir, n_sources=300, n_docs=3000, seed=0, n_topics=25, vocab_size=1500, popularity_skew=1.0))]
    fn write_synthetic(
        dir: PathBuf,
        n_sources: usize,
        n_docs: usize,
        seed: u64,
        n_topics: usize,
        vocab_size: usize,
        popularity_skew: f64,
    ) -> PyResult<usize> {
        let spec = SyntheticSpec {
            n_sources,
            n_docs,
            seed,
            n_topics,
            vocab_size,
            popularity_skew,
            ..SyntheticSpec::default()
        };
        let corpus = generate(&spec).map_err(value_err)?;
        corpus.write_to(&dir).map_err(|e| match e {
            synth::SynthError::Io(io) => PyOSError::new_err(io.to_string()),
            other => value_err(other),
        })?;
        Ok(corpus.samples.len())
    }

    /// Runs every stage for a TOML config and returns one dict per
    /// (system, k) row of the metrics table.
    #[pyfunction]
    #[pyo3(signature = (config, out_dir=None, seed=None))]
    fn run_pipeline<'py>(
        py: Python<'py>,
        config: PathBuf,
        out_dir: Option<PathBuf>,
        seed: Option<u64>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut cfg = PipelineConfig::load(&config).map_err(pipeline_err)?;
        if let Some(dir) = out_dir {
            cfg.out_dir = dir;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        let layout = Layout::new(&cfg.out_dir);
        let report = py.detach(|| run_all(&cfg, &layout)).map_err(pipeline_err)?;
        report
            .rows
            .iter()
            .map(|r| {
                let row = PyDict::new(py);
                row.set_item("system", &r.system)?;
                row.set_item("k", r.k)?;
                row.set_item("recall", r.recall)?;
                row.set_item("map", r.map)?;
                row.set_item("ndcg", r.ndcg)?;
                row.set_item("diversity", r.diversity)?;
                row.set_item("coverage", r.coverage)?;
                row.set_item("arp", r.arp)?;
                row.set_item("queries", r.queries)?;
                Ok(row)
            })
            .collect()
    }
}
