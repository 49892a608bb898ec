//! Ranking quality, diversity and popularity measures, and the comparison
//! report built from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceId;
use crate::index::Index;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold set for query {0:?} is empty")]
    EmptyGold(String),
    #[error("need at least two embedded items, found {0}")]
    TooFewEmbedded(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding for {token:?} has {got} values, expected {expected}")]
    Dimension { token: String, got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn hits<'a>(ranking: &'a [SourceId], gold: &'a BTreeSet<SourceId>, k: usize) -> impl Iterator<Item = (usize, bool)> + 'a {
    ranking.iter().take(k).map(|s| gold.contains(s)).enumerate()
}

fn require_gold(gold: &BTreeSet<SourceId>) -> Result<(), MetricsError> {
    if gold.is_empty() {
        Err(MetricsError::EmptyGold(String::new()))
    } else {
        Ok(())
    }
}

pub fn recall_at_k(ranking: &[SourceId], gold: &BTreeSet<SourceId>, k: usize) -> Result<f64, MetricsError> {
    require_gold(gold)?;
    let found = hits(ranking, gold, k).filter(|(_, h)| *h).count();
    Ok(found as f64 / gold.len() as f64)
}

/// Average precision over the whole ranking, normalized by |gold|.
pub fn average_precision(ranking: &[SourceId], gold: &BTreeSet<SourceId>) -> Result<f64, MetricsError> {
    average_precision_at_k(ranking, gold, usize::MAX)
}

pub fn average_precision_at_k(ranking: &[SourceId], gold: &BTreeSet<SourceId>, k: usize) -> Result<f64, MetricsError> {
    require_gold(gold)?;
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, hit) in hits(ranking, gold, k) {
        if hit {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / gold.len() as f64)
}

/// Discount at 1-based rank `rank`: 1 for the first position, 1/log2(rank) after.
fn discount(rank: usize) -> f64 {
    if rank == 1 {
        1.0
    } else {
        1.0 / (rank as f64).log2()
    }
}

pub fn ndcg_at_k(ranking: &[SourceId], gold: &BTreeSet<SourceId>, k: usize) -> Result<f64, MetricsError> {
    require_gold(gold)?;
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let dcg: f64 = hits(ranking, gold, k).filter(|(_, h)| *h).map(|(i, _)| discount(i + 1)).sum();
    // ideal DCG over the whole gold set, not truncated at k
    let ideal: f64 = (1..=gold.len()).map(discount).sum();
    Ok(dcg / ideal)
}

/// Word2vec-style text embeddings. Tokens use `_` where source ids have spaces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

fn token_for(source: &SourceId) -> String {
    source.as_str().replace(' ', "_")
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, source: &SourceId, vector: Vec<f64>) -> Result<(), MetricsError> {
        let token = token_for(source);
        if vector.len() != self.dim {
            return Err(MetricsError::Dimension {
                token,
                got: vector.len(),
                expected: self.dim,
            });
        }
        self.vectors.insert(token, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, source: &SourceId) -> Option<&[f64]> {
        self.vectors.get(&token_for(source)).map(Vec::as_slice)
    }

    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(MetricsError::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let header: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: Option<&&str>| s.and_then(|s| s.parse::<usize>().ok());
        let (count, dim) = match (parse_usize(header.first()), parse_usize(header.get(1))) {
            (Some(c), Some(d)) if header.len() == 2 => (c, d),
            _ => {
                return Err(MetricsError::Parse {
                    line: 1,
                    message: "header must be \"count dim\"".into(),
                })
            }
        };
        let mut table = EmbeddingTable::new(dim);
        for (i, line) in lines {
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default().to_string();
            let vector = fields
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| MetricsError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if vector.len() != dim {
                return Err(MetricsError::Dimension {
                    token,
                    got: vector.len(),
                    expected: dim,
                });
            }
            table.vectors.insert(token, vector);
        }
        if table.vectors.len() != count {
            return Err(MetricsError::Parse {
                line: 1,
                message: format!("header declares {count} vectors, file has {}", table.vectors.len()),
            });
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Writes tokens in sorted order so output is reproducible.
    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{} {}", self.vectors.len(), self.dim)?;
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        for t in tokens {
            write!(out, "{t}")?;
            for v in &self.vectors[t] {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    pub value: f64,
    /// Items skipped for lacking an embedding.
    pub excluded: usize,
}

/// Mean Euclidean distance over unordered pairs of embedded items.
pub fn diversity(ranking: &[SourceId], embeddings: &EmbeddingTable) -> Result<Diversity, MetricsError> {
    let vectors: Vec<&[f64]> = ranking.iter().filter_map(|s| embeddings.get(s)).collect();
    let excluded = ranking.len() - vectors.len();
    if vectors.len() < 2 {
        return Err(MetricsError::TooFewEmbedded(vectors.len()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, a) in vectors.iter().enumerate() {
        for b in &vectors[i + 1..] {
            sum += a.iter().zip(*b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(Diversity {
        value: sum / pairs as f64,
        excluded,
    })
}

pub fn coverage<'a, I>(rankings: I, train_sources: &BTreeSet<SourceId>, k: usize) -> f64
where
    I: IntoIterator<Item = &'a [SourceId]>,
{
    if train_sources.is_empty() {
        return 0.0;
    }
    let recommended: BTreeSet<&SourceId> = rankings
        .into_iter()
        .flat_map(|r| r.iter().take(k))
        .filter(|s| train_sources.contains(*s))
        .collect();
    recommended.len() as f64 / train_sources.len() as f64
}

/// Training-set occurrence counts. Unknown sources count as 0.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityTable(pub BTreeMap<SourceId, u64>);

#[derive(Serialize, Deserialize)]
struct PopularityRow {
    source: SourceId,
    count: u64,
}

impl PopularityTable {
    pub fn from_index(index: &Index) -> Self {
        PopularityTable(index.popularity())
    }

    pub fn get(&self, source: &SourceId) -> u64 {
        self.0.get(source).copied().unwrap_or(0)
    }

    pub fn load_csv(path: &Path) -> Result<Self, MetricsError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut table = BTreeMap::new();
        for row in reader.deserialize() {
            let row: PopularityRow = row?;
            table.insert(row.source, row.count);
        }
        Ok(PopularityTable(table))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut writer = csv::Writer::from_path(path)?;
        for (source, &count) in &self.0 {
            writer.serialize(PopularityRow {
                source: source.clone(),
                count,
            })?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Mean popularity of one list's top-k, or `None` for an empty list.
pub fn list_popularity(ranking: &[SourceId], popularity: &PopularityTable, k: usize) -> Option<f64> {
    let top = &ranking[..ranking.len().min(k)];
    if top.is_empty() {
        return None;
    }
    Some(top.iter().map(|s| popularity.get(s) as f64).sum::<f64>() / top.len() as f64)
}

/// Mean over queries of each list's mean top-k popularity. Empty lists are skipped.
pub fn arp<'a, I>(rankings: I, popularity: &PopularityTable, k: usize) -> f64
where
    I: IntoIterator<Item = &'a [SourceId]>,
{
    mean(rankings.into_iter().filter_map(|r| list_popularity(r, popularity, k)))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GoldSet(pub BTreeMap<String, BTreeSet<SourceId>>);

#[derive(Serialize, Deserialize)]
struct GoldLine {
    query_id: String,
    gold: Vec<SourceId>,
}

impl GoldSet {
    pub fn insert(&mut self, query_id: impl Into<String>, gold: BTreeSet<SourceId>) -> Result<(), MetricsError> {
        let query_id = query_id.into();
        if gold.is_empty() {
            return Err(MetricsError::EmptyGold(query_id));
        }
        self.0.insert(query_id, gold);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeSet<SourceId>> {
        self.0.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let mut set = GoldSet::default();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: GoldLine = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            set.insert(parsed.query_id, parsed.gold.into_iter().collect())?;
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        let mut out = BufWriter::new(File::create(path)?);
        for (query_id, gold) in &self.0 {
            let line = GoldLine {
                query_id: query_id.clone(),
                gold: gold.iter().cloned().collect(),
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-query recommendations for one system.
pub type Rankings = BTreeMap<String, Vec<SourceId>>;

/// Everything besides rankings and gold that the report needs.
#[derive(Clone, Debug, Default)]
pub struct EvalTables {
    pub embeddings: Option<EmbeddingTable>,
    pub popularity: PopularityTable,
    pub train_sources: BTreeSet<SourceId>,
}

impl EvalTables {
    pub fn from_index(index: &Index, embeddings: Option<EmbeddingTable>) -> Self {
        EvalTables {
            embeddings,
            popularity: PopularityTable::from_index(index),
            train_sources: index.sources().cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub system: String,
    pub query_id: String,
    pub k: usize,
    pub recall: f64,
    pub ap: f64,
    pub ndcg: f64,
    pub diversity: Option<f64>,
    pub popularity: Option<f64>,
    pub excluded: usize,
    /// Top-k recommendations joined with `|`.
    pub recommended: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub system: String,
    pub k: usize,
    pub recall: f64,
    pub map: f64,
    pub ndcg: f64,
    pub diversity: f64,
    pub coverage: f64,
    pub arp: f64,
    pub queries: usize,
    /// Items without embeddings, summed over queries.
    pub diversity_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k_values: Vec<usize>,
    pub query_count: usize,
    pub rows: Vec<MetricRow>,
    pub per_query: Vec<QueryMetrics>,
}

fn query_metrics(
    system: &str,
    query_id: &str,
    ranking: &[SourceId],
    gold: &BTreeSet<SourceId>,
    tables: &EvalTables,
    k: usize,
) -> Result<QueryMetrics, MetricsError> {
    let top = &ranking[..ranking.len().min(k)];
    let div = tables.embeddings.as_ref().map(|e| diversity(top, e));
    let (diversity, excluded) = match div {
        Some(Ok(d)) => (Some(d.value), d.excluded),
        Some(Err(_)) => (None, top.iter().filter(|s| tables.embeddings.as_ref().and_then(|e| e.get(s)).is_none()).count()),
        None => (None, 0),
    };
    Ok(QueryMetrics {
        system: system.to_string(),
        query_id: query_id.to_string(),
        k,
        recall: recall_at_k(top, gold, k)?,
        ap: average_precision_at_k(top, gold, k)?,
        ndcg: ndcg_at_k(top, gold, k)?,
        diversity,
        popularity: list_popularity(top, &tables.popularity, k),
        excluded,
        recommended: top.iter().map(SourceId::as_str).collect::<Vec<_>>().join("|"),
    })
}

fn split_recommended(joined: &str) -> Vec<SourceId> {
    joined
        .split('|')
        .filter(|s| !s.is_empty())
        .filter_map(|s| SourceId::new(s).ok())
        .collect()
}

/// Folds per-query rows (already grouped by system then k, in query order)
/// into one row per (system, k).
fn aggregate_rows(per_query: &[QueryMetrics], train_sources: &BTreeSet<SourceId>) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut start = 0;
    while start < per_query.len() {
        let first = &per_query[start];
        let end = start
            + per_query[start..]
                .iter()
                .take_while(|q| q.system == first.system && q.k == first.k)
                .count();
        let block = &per_query[start..end];
        let lists: Vec<Vec<SourceId>> = block.iter().map(|q| split_recommended(&q.recommended)).collect();
        rows.push(MetricRow {
            system: first.system.clone(),
            k: first.k,
            recall: mean(block.iter().map(|q| q.recall)),
            map: mean(block.iter().map(|q| q.ap)),
            ndcg: mean(block.iter().map(|q| q.ndcg)),
            diversity: mean(block.iter().filter_map(|q| q.diversity)),
            coverage: coverage(lists.iter().map(Vec::as_slice), train_sources, first.k),
            arp: mean(block.iter().filter_map(|q| q.popularity)),
            queries: block.len(),
            diversity_excluded: block.iter().map(|q| q.excluded).sum(),
        });
        start = end;
    }
    rows
}

/// Scores every system on every gold query at each k. Systems keep the
/// given order; a query missing from a system counts as an empty list.
pub fn evaluate(
    systems: &[(String, Rankings)],
    gold: &GoldSet,
    tables: &EvalTables,
    k_values: &[usize],
) -> Result<MetricsReport, MetricsError> {
    if k_values.contains(&0) {
        return Err(MetricsError::ZeroK);
    }
    for (qid, g) in &gold.0 {
        if g.is_empty() {
            return Err(MetricsError::EmptyGold(qid.clone()));
        }
    }
    let empty = Vec::new();
    let mut per_query = Vec::new();
    for (system, rankings) in systems {
        for &k in k_values {
            let block = gold
                .0
                .par_iter()
                .map(|(qid, g)| query_metrics(system, qid, rankings.get(qid).unwrap_or(&empty), g, tables, k))
                .collect::<Result<Vec<_>, _>>()?;
            per_query.extend(block);
        }
    }
    Ok(MetricsReport {
        k_values: k_values.to_vec(),
        query_count: gold.len(),
        rows: aggregate_rows(&per_query, &tables.train_sources),
        per_query,
    })
}

impl MetricsReport {
    pub fn row(&self, system: &str, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.system == system && r.k == k)
    }

    /// Aligned text table, one line per system, metric@k columns for every k.
    pub fn to_table(&self) -> String {
        let mut header = vec!["System".to_string()];
        for k in &self.k_values {
            for m in ["Recall", "MAP", "NDCG", "Diversity", "Coverage", "ARP"] {
                header.push(format!("{m}@{k}"));
            }
        }
        let mut systems: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !systems.contains(&r.system.as_str()) {
                systems.push(&r.system);
            }
        }
        let mut body: Vec<Vec<String>> = Vec::new();
        for s in systems {
            let mut cells = vec![s.to_string()];
            for &k in &self.k_values {
                if let Some(r) = self.row(s, k) {
                    cells.extend([
                        format!("{:.4}", r.recall),
                        format!("{:.4}", r.map),
                        format!("{:.4}", r.ndcg),
                        format!("{:.3}", r.diversity),
                        format!("{:.4}", r.coverage),
                        format!("{:.2}", r.arp),
                    ]);
                }
            }
            body.push(cells);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            let padded: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&header, &mut out);
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for r in &body {
            line(r, &mut out);
        }
        let _ = writeln!(out, "queries: {}", self.query_count);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_per_query_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        for q in &self.per_query {
            w.serialize(q)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a report from a per-query dump.
    pub fn from_per_query_csv(path: &Path, train_sources: &BTreeSet<SourceId>) -> Result<Self, MetricsError> {
        let mut reader = csv::Reader::from_path(path)?;
        let per_query = reader.deserialize().collect::<Result<Vec<QueryMetrics>, _>>()?;
        let mut k_values = Vec::new();
        let mut queries = BTreeSet::new();
        for q in &per_query {
            if !k_values.contains(&q.k) {
                k_values.push(q.k);
            }
            queries.insert(q.query_id.clone());
        }
        Ok(MetricsReport {
            k_values,
            query_count: queries.len(),
            rows: aggregate_rows(&per_query, train_sources),
            per_query,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<SourceId> {
        names.iter().map(|n| SourceId::new(*n).unwrap()).collect()
    }

    fn set(names: &[&str]) -> BTreeSet<SourceId> {
        ids(names).into_iter().collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn recall_examples() {
        assert!(close(recall_at_k(&ids(&["A", "C"]), &set(&["A", "B"]), 2).unwrap(), 0.5));
        assert!(close(recall_at_k(&ids(&["B", "X", "A"]), &set(&["A", "B"]), 3).unwrap(), 1.0));
        assert!(close(recall_at_k(&ids(&["X", "Y"]), &set(&["A"]), 2).unwrap(), 0.0));
        assert!(recall_at_k(&ids(&["X"]), &set(&[]), 2).is_err());
    }

    #[test]
    fn ap_examples() {
        assert!(close(average_precision(&ids(&["B", "A"]), &set(&["A"])).unwrap(), 0.5));
        assert!(close(average_precision(&ids(&["A", "B"]), &set(&["A", "B"])).unwrap(), 1.0));
        assert!(close(average_precision(&ids(&["A", "X", "B", "Y"]), &set(&["A", "B"])).unwrap(), 5.0 / 6.0));
        // unretrieved gold counts in the denominator
        assert!(close(average_precision(&ids(&["A"]), &set(&["A", "B"])).unwrap(), 0.5));
    }

    #[test]
    fn ndcg_examples() {
        assert!(close(ndcg_at_k(&ids(&["A", "X"]), &set(&["A"]), 10).unwrap(), 1.0));
        assert!(close(ndcg_at_k(&ids(&["X", "Y", "A"]), &set(&["A"]), 10).unwrap(), 1.0 / 3f64.log2()));
        assert!(close(ndcg_at_k(&ids(&["X", "Y", "A"]), &set(&["A"]), 2).unwrap(), 0.0));
        assert!(close(ndcg_at_k(&ids(&["A", "B"]), &set(&["A", "B"]), 1).unwrap(), 1.0 / 2.0));
    }

    fn table(rows: &[(&str, &[f64])]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(rows[0].1.len());
        for (n, v) in rows {
            t.insert(&SourceId::new(*n).unwrap(), v.to_vec()).unwrap();
        }
        t
    }

    #[test]
    fn diversity_examples() {
        let t = table(&[("A", &[0.0, 0.0]), ("B", &[3.0, 4.0]), ("C", &[1.0, 0.0]), ("D", &[0.0, 1.0])]);
        assert!(close(diversity(&ids(&["A", "B"]), &t).unwrap().value, 5.0));
        let same = table(&[("A", &[1.0, 2.0]), ("B", &[1.0, 2.0])]);
        assert!(close(diversity(&ids(&["A", "B"]), &same).unwrap().value, 0.0));
        let d = diversity(&ids(&["A", "C", "Z", "D"]), &t).unwrap();
        assert!(close(d.value, (2.0 + 2f64.sqrt()) / 3.0));
        assert_eq!(d.excluded, 1);
        assert!(matches!(diversity(&ids(&["A", "Z"]), &t), Err(MetricsError::TooFewEmbedded(1))));
    }

    #[test]
    fn coverage_examples() {
        let train = set(&["A", "B", "C", "D"]);
        let lists = [ids(&["A", "X"]), ids(&["C"])];
        assert!(close(coverage(lists.iter().map(Vec::as_slice), &train, 20), 0.5));
        let all = [ids(&["A", "B"]), ids(&["C", "D"])];
        assert!(close(coverage(all.iter().map(Vec::as_slice), &train, 20), 1.0));
        assert!(close(coverage(std::iter::empty(), &train, 20), 0.0));
    }

    #[test]
    fn arp_examples() {
        let pop = PopularityTable(BTreeMap::from([(SourceId::new("A").unwrap(), 10), (SourceId::new("B").unwrap(), 2)]));
        let one = [ids(&["A", "B"])];
        assert!(close(arp(one.iter().map(Vec::as_slice), &pop, 20), 6.0));
        let pop2 = PopularityTable(BTreeMap::from([
            (SourceId::new("A").unwrap(), 10),
            (SourceId::new("B").unwrap(), 2),
            (SourceId::new("C").unwrap(), 4),
        ]));
        let two = [ids(&["A", "B"]), ids(&["C"])];
        assert!(close(arp(two.iter().map(Vec::as_slice), &pop2, 20), 5.0));
        let unseen = [ids(&["X", "Y"])];
        assert!(close(arp(unseen.iter().map(Vec::as_slice), &pop, 20), 0.0));
    }

    #[test]
    fn embedding_text_format() {
        let t = EmbeddingTable::parse("2 3\nNew_York 1 2 3\nWHO 0.5 0 -1\n").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get(&SourceId::new("New York").unwrap()), Some(&[1.0, 2.0, 3.0][..]));
        assert!(EmbeddingTable::parse("1 3\nA 1 2\n").is_err());
        assert!(EmbeddingTable::parse("2 1\nA 1\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        t.write(&p).unwrap();
        assert_eq!(EmbeddingTable::load(&p).unwrap(), t);
    }

    fn gold(entries: &[(&str, &[&str])]) -> GoldSet {
        let mut g = GoldSet::default();
        for (q, s) in entries {
            g.insert(*q, set(s)).unwrap();
        }
        g
    }

    fn rankings(entries: &[(&str, &[&str])]) -> Rankings {
        entries.iter().map(|(q, r)| (q.to_string(), ids(r))).collect()
    }

    #[test]
    fn evaluate_single_perfect_query() {
        let report = evaluate(
            &[("DER".into(), rankings(&[("q1", &["A", "B"])]))],
            &gold(&[("q1", &["A"])]),
            &EvalTables::default(),
            &[20],
        )
        .unwrap();
        let row = report.row("DER", 20).unwrap();
        assert_eq!((row.recall, row.map, row.ndcg), (1.0, 1.0, 1.0));
    }

    #[test]
    fn identical_systems_identical_rows() {
        let r = rankings(&[("q1", &["A", "B", "C"]), ("q2", &["C", "D"])]);
        let report = evaluate(
            &[("X".into(), r.clone()), ("Y".into(), r)],
            &gold(&[("q1", &["B"]), ("q2", &["D", "E"])]),
            &EvalTables::default(),
            &[1, 2],
        )
        .unwrap();
        for k in [1, 2] {
            let (x, y) = (report.row("X", k).unwrap(), report.row("Y", k).unwrap());
            assert_eq!(MetricRow { system: "Y".into(), ..x.clone() }, *y);
        }
        assert!(report.to_table().contains("Recall@2"));
    }

    #[test]
    fn per_query_csv_regenerates_report() {
        let tables = EvalTables {
            embeddings: Some(table(&[("A", &[0.1, 0.7]), ("B", &[0.3, -1.0]), ("C", &[2.0, 0.0])])),
            popularity: PopularityTable(BTreeMap::from([(SourceId::new("A").unwrap(), 7), (SourceId::new("C").unwrap(), 3)])),
            train_sources: set(&["A", "B", "C", "D"]),
        };
        let report = evaluate(
            &[
                ("DER".into(), rankings(&[("q1", &["A", "B", "C"]), ("q2", &["C", "A"]), ("q3", &["D"])])),
                ("MRF".into(), rankings(&[("q1", &["C", "A"]), ("q2", &["B", "C", "A"])])),
            ],
            &gold(&[("q1", &["B"]), ("q2", &["A", "D"]), ("q3", &["C"])]),
            &tables,
            &[2, 3],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("per_query.csv");
        report.write_per_query_csv(&p).unwrap();
        let again = MetricsReport::from_per_query_csv(&p, &tables.train_sources).unwrap();
        assert_eq!(again.rows.len(), report.rows.len());
        for (a, b) in again.rows.iter().zip(&report.rows) {
            for (x, y) in [
                (a.recall, b.recall),
                (a.map, b.map),
                (a.ndcg, b.ndcg),
                (a.diversity, b.diversity),
                (a.coverage, b.coverage),
                (a.arp, b.arp),
            ] {
                assert!(close(x, y), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn gold_and_popularity_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = gold(&[("q1", &["A", "B"]), ("q2", &["C"])]);
        g.write(&dir.path().join("gold.jsonl")).unwrap();
        assert_eq!(GoldSet::load(&dir.path().join("gold.jsonl")).unwrap(), g);
        let pop = PopularityTable(BTreeMap::from([(SourceId::new("New York Times").unwrap(), 4)]));
        pop.write_csv(&dir.path().join("pop.csv")).unwrap();
        assert_eq!(PopularityTable::load_csv(&dir.path().join("pop.csv")).unwrap(), pop);
        std::fs::write(dir.path().join("bad.jsonl"), "{\"query_id\":\"q\",\"gold\":[]}\n").unwrap();
        assert!(matches!(GoldSet::load(&dir.path().join("bad.jsonl")), Err(MetricsError::EmptyGold(_))));
    }
}
