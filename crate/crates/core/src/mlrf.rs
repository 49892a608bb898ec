//! Multi-layer ranking-based filter.
//!
//! Each layer shuffles its input, cuts it into contiguous groups, reranks
//! every group and keeps the top of each. The layer stack is repeated with
//! independent per-repetition seeds, and survivors are aggregated either by
//! final-layer frequency or by a weighted sum of per-layer frequencies.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceId;
use crate::reranker::{Candidate, Exemplar, Ranker, RerankRequest, DEFAULT_GROUP_SIZE};
use crate::retrieval::{RankedItem, RankedList};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("no candidates to filter")]
    EmptyCandidates,
    #[error("duplicate candidate {0}")]
    DuplicateCandidate(SourceId),
    #[error("layer keeps {keep} per group but {input} candidates in {groups} groups give at most {max} per group")]
    KeepTooLarge {
        keep: usize,
        input: usize,
        groups: usize,
        max: usize,
    },
    #[error("group of {size} exceeds the ranker group limit {limit}")]
    GroupTooLarge { size: usize, limit: usize },
    #[error("{weights} layer weights given for {layers} layers")]
    WeightMismatch { weights: usize, layers: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub groups: usize,
    pub keep_per_group: usize,
}

impl LayerSpec {
    pub const fn new(groups: usize, keep_per_group: usize) -> Self {
        LayerSpec { groups, keep_per_group }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    MostFrequent,
    LayerWeighted,
}

fn default_group_limit() -> usize {
    DEFAULT_GROUP_SIZE
}

fn default_parallel() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub layers: Vec<LayerSpec>,
    pub repetitions: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub layer_weights: Vec<f64>,
    pub output_k: usize,
    #[serde(default)]
    pub seed: u64,
    /// Largest group a ranker may receive.
    #[serde(default = "default_group_limit")]
    pub group_size_limit: usize,
    /// Run repetitions concurrently. Results do not depend on this.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

impl Default for FilterConfig {
    /// 100 candidates → 10 groups keep 5 → 5 groups keep 2, twenty times,
    /// top 20 by final-layer frequency.
    fn default() -> Self {
        FilterConfig {
            layers: vec![LayerSpec::new(10, 5), LayerSpec::new(5, 2)],
            repetitions: 20,
            strategy: Strategy::MostFrequent,
            layer_weights: vec![0.25, 0.75],
            output_k: 20,
            seed: 0,
            group_size_limit: DEFAULT_GROUP_SIZE,
            parallel: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::InvalidConfig(m.to_string()));
        if self.layers.is_empty() {
            return bad("at least one layer is required");
        }
        if self.layers.iter().any(|l| l.groups == 0 || l.keep_per_group == 0) {
            return bad("groups and keep_per_group must be at least 1");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.output_k == 0 {
            return bad("output_k must be at least 1");
        }
        if self.group_size_limit == 0 {
            return bad("group_size_limit must be at least 1");
        }
        if self.strategy == Strategy::LayerWeighted {
            check_weights(&self.layer_weights, self.layers.len())?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, FilterError> {
        let cfg: FilterConfig = toml::from_str(text).map_err(|e| FilterError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_weights(weights: &[f64], layers: usize) -> Result<(), FilterError> {
    if weights.len() != layers {
        return Err(FilterError::WeightMismatch {
            weights: weights.len(),
            layers,
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(FilterError::InvalidConfig("layer weights must be non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FilterError::InvalidConfig(format!("layer weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// What a ranker needs besides the candidate ids: the query text, the
/// display name of each source and the prompt exemplar.
#[derive(Clone, Debug)]
pub struct RerankContext<'a> {
    pub query: &'a str,
    pub names: &'a BTreeMap<SourceId, String>,
    pub exemplar: &'a Exemplar,
}

impl RerankContext<'_> {
    fn request(&self, group: &[SourceId], limit: usize) -> Result<RerankRequest, FilterError> {
        let mut seen = HashSet::new();
        let candidates = group
            .iter()
            .map(|s| {
                let base = self.names.get(s).cloned().unwrap_or_else(|| s.to_string());
                // two sources sharing a surface name get their id appended
                let name = if seen.insert(base.to_lowercase()) {
                    base
                } else {
                    format!("{base} [{s}]")
                };
                Candidate {
                    source: s.clone(),
                    name,
                }
            })
            .collect();
        RerankRequest::new(self.query, candidates, self.exemplar.clone(), limit).map_err(|e| match e {
            crate::reranker::RerankError::GroupTooLarge { got, limit } => FilterError::GroupTooLarge { size: got, limit },
            other => FilterError::InvalidConfig(other.to_string()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    /// Group members in shuffled order, as sent to the ranker.
    pub members: Vec<SourceId>,
    pub reranked: Vec<SourceId>,
    pub repaired: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repair_notes: Vec<String>,
    /// Set when the ranker failed and the shuffled order was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub groups: Vec<GroupTrace>,
    pub retained: Vec<SourceId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionTrace {
    pub repetition: usize,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub layers: Vec<LayerSpec>,
    pub repetitions: Vec<RepetitionTrace>,
}

impl RunTrace {
    pub fn fallback_count(&self) -> usize {
        self.groups().filter(|g| g.fallback.is_some()).count()
    }

    pub fn repaired_count(&self) -> usize {
        self.groups().filter(|g| g.repaired).count()
    }

    pub fn group_count(&self) -> usize {
        self.groups().count()
    }

    fn groups(&self) -> impl Iterator<Item = &GroupTrace> {
        self.repetitions
            .iter()
            .flat_map(|r| r.layers.iter())
            .flat_map(|l| l.groups.iter())
    }

    /// One JSON object per (repetition, layer).
    pub fn write_jsonl<W: Write>(&self, query_id: &str, out: &mut W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            query_id: &'a str,
            repetition: usize,
            layer: usize,
            groups: &'a [GroupTrace],
            retained: &'a [SourceId],
        }
        for rep in &self.repetitions {
            for (layer, lt) in rep.layers.iter().enumerate() {
                serde_json::to_writer(
                    &mut *out,
                    &Line {
                        query_id,
                        repetition: rep.repetition,
                        layer,
                        groups: &lt.groups,
                        retained: &lt.retained,
                    },
                )?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Contiguous chunk lengths for `n` items in `groups` groups; lengths differ
/// by at most one and longer chunks come first.
pub fn chunk_sizes(n: usize, groups: usize) -> Vec<usize> {
    let (base, extra) = (n / groups, n % groups);
    (0..groups).map(|g| base + usize::from(g < extra)).collect()
}

fn check_distinct(candidates: &[SourceId]) -> Result<(), FilterError> {
    if candidates.is_empty() {
        return Err(FilterError::EmptyCandidates);
    }
    let mut seen = HashSet::with_capacity(candidates.len());
    for c in candidates {
        if !seen.insert(c) {
            return Err(FilterError::DuplicateCandidate(c.clone()));
        }
    }
    Ok(())
}

fn is_permutation(a: &[SourceId], b: &[SourceId]) -> bool {
    let mut a: Vec<&SourceId> = a.iter().collect();
    let mut b: Vec<&SourceId> = b.iter().collect();
    a.sort();
    b.sort();
    a == b
}

pub fn run_layer<R: Rng>(
    candidates: &[SourceId],
    spec: LayerSpec,
    ranker: &dyn Ranker,
    ctx: &RerankContext<'_>,
    group_limit: usize,
    rng: &mut R,
) -> Result<LayerTrace, FilterError> {
    check_distinct(candidates)?;
    if spec.groups == 0 || spec.keep_per_group == 0 {
        return Err(FilterError::InvalidConfig("groups and keep_per_group must be at least 1".into()));
    }
    let max = candidates.len().div_ceil(spec.groups);
    if spec.keep_per_group > max {
        return Err(FilterError::KeepTooLarge {
            keep: spec.keep_per_group,
            input: candidates.len(),
            groups: spec.groups,
            max,
        });
    }
    let mut shuffled = candidates.to_vec();
    shuffle(&mut shuffled, rng);

    let mut groups = Vec::with_capacity(spec.groups);
    let mut retained = Vec::new();
    let mut start = 0;
    for size in chunk_sizes(shuffled.len(), spec.groups) {
        let members = &shuffled[start..start + size];
        start += size;
        if members.is_empty() {
            continue;
        }
        let request = ctx.request(members, group_limit)?;
        let trace = match ranker.rerank(&request) {
            Ok(resp) if is_permutation(&resp.ranking.to_sources(), members) => GroupTrace {
                members: members.to_vec(),
                reranked: resp.ranking.to_sources(),
                repaired: resp.repaired,
                repair_notes: resp.repair_notes,
                fallback: None,
            },
            Ok(_) => GroupTrace {
                members: members.to_vec(),
                reranked: members.to_vec(),
                repaired: true,
                repair_notes: vec![],
                fallback: Some("ranker returned a non-permutation".into()),
            },
            Err(e) => GroupTrace {
                members: members.to_vec(),
                reranked: members.to_vec(),
                repaired: false,
                repair_notes: vec![],
                fallback: Some(e.to_string()),
            },
        };
        retained.extend(trace.reranked.iter().take(spec.keep_per_group).cloned());
        groups.push(trace);
    }
    Ok(LayerTrace { groups, retained })
}

/// The random stream for one repetition: the config seed selects the key,
/// the repetition number selects the stream.
pub fn repetition_rng(seed: u64, repetition: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repetition as u64);
    rng
}

fn run_repetition(
    candidates: &[SourceId],
    config: &FilterConfig,
    ranker: &dyn Ranker,
    ctx: &RerankContext<'_>,
    repetition: usize,
) -> Result<RepetitionTrace, FilterError> {
    let mut rng = repetition_rng(config.seed, repetition);
    let mut input = candidates.to_vec();
    let mut layers = Vec::with_capacity(config.layers.len());
    for &spec in &config.layers {
        let trace = run_layer(&input, spec, ranker, ctx, config.group_size_limit, &mut rng)?;
        input = trace.retained.clone();
        layers.push(trace);
    }
    Ok(RepetitionTrace { repetition, layers })
}

pub fn run_filter(
    candidates: &[SourceId],
    config: &FilterConfig,
    ranker: &dyn Ranker,
    ctx: &RerankContext<'_>,
) -> Result<RunTrace, FilterError> {
    config.validate()?;
    check_distinct(candidates)?;
    let repetitions = if config.parallel {
        (0..config.repetitions)
            .into_par_iter()
            .map(|r| run_repetition(candidates, config, ranker, ctx, r))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        (0..config.repetitions)
            .map(|r| run_repetition(candidates, config, ranker, ctx, r))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(RunTrace {
        layers: config.layers.clone(),
        repetitions,
    })
}

#[derive(Default)]
struct Tally {
    per_layer: Vec<usize>,
    final_position_sum: usize,
    final_appearances: usize,
}

impl Tally {
    fn mean_final_position(&self) -> f64 {
        if self.final_appearances == 0 {
            f64::INFINITY
        } else {
            self.final_position_sum as f64 / self.final_appearances as f64
        }
    }
}

fn tally(trace: &RunTrace) -> BTreeMap<&SourceId, Tally> {
    let n_layers = trace.layers.len();
    let mut tallies: BTreeMap<&SourceId, Tally> = BTreeMap::new();
    for rep in &trace.repetitions {
        for (l, layer) in rep.layers.iter().enumerate() {
            for s in &layer.retained {
                let t = tallies.entry(s).or_insert_with(|| Tally {
                    per_layer: vec![0; n_layers],
                    ..Tally::default()
                });
                t.per_layer[l] += 1;
            }
            if l + 1 == n_layers {
                let keep = trace.layers[l].keep_per_group;
                for g in &layer.groups {
                    for (pos, s) in g.reranked.iter().take(keep).enumerate() {
                        if let Some(t) = tallies.get_mut(s) {
                            t.final_position_sum += pos;
                            t.final_appearances += 1;
                        }
                    }
                }
            }
        }
    }
    tallies
}

fn rank_by_score(scored: Vec<(&SourceId, f64, f64)>, output_k: usize) -> RankedList {
    let mut scored: Vec<_> = scored.into_iter().filter(|(_, s, _)| *s > 0.0).collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.2.total_cmp(&b.2))
            .then_with(|| a.0.cmp(b.0))
    });
    scored.truncate(output_k);
    RankedList::from_items(
        scored
            .into_iter()
            .map(|(s, score, _)| RankedItem {
                source: s.clone(),
                score: Some(score),
            })
            .collect(),
    )
    .expect("tally keys are distinct")
}

/// Ranks final-layer survivors by how many repetitions kept them. Ties go
/// to the better mean position inside final reranked groups, then to the
/// smaller source id.
pub fn aggregate_most_frequent(trace: &RunTrace, output_k: usize) -> RankedList {
    let last = trace.layers.len().saturating_sub(1);
    let scored = tally(trace)
        .iter()
        .map(|(s, t)| (*s, t.per_layer[last] as f64, t.mean_final_position()))
        .collect();
    rank_by_score(scored, output_k)
}

/// Ranks candidates by Σ_layer weight · (appearances in that layer / repetitions).
pub fn aggregate_layer_weighted(trace: &RunTrace, weights: &[f64], output_k: usize) -> Result<RankedList, FilterError> {
    if weights.len() != trace.layers.len() {
        return Err(FilterError::WeightMismatch {
            weights: weights.len(),
            layers: trace.layers.len(),
        });
    }
    let reps = trace.repetitions.len().max(1) as f64;
    let scored = tally(trace)
        .iter()
        .map(|(s, t)| {
            let score = weights
                .iter()
                .zip(&t.per_layer)
                .map(|(w, &n)| w * n as f64 / reps)
                .sum();
            (*s, score, t.mean_final_position())
        })
        .collect();
    Ok(rank_by_score(scored, output_k))
}

pub fn aggregate(trace: &RunTrace, config: &FilterConfig) -> Result<RankedList, FilterError> {
    match config.strategy {
        Strategy::MostFrequent => Ok(aggregate_most_frequent(trace, config.output_k)),
        Strategy::LayerWeighted => aggregate_layer_weighted(trace, &config.layer_weights, config.output_k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reranker::{IdentityRanker, OracleRanker, RelevanceTable, RerankError, RerankResponse};

    fn ids(n: usize) -> Vec<SourceId> {
        (0..n).map(|i| SourceId::new(format!("s{i:03}")).unwrap()).collect()
    }

    fn id(s: &str) -> SourceId {
        SourceId::new(s).unwrap()
    }

    fn with_ctx<T>(f: impl FnOnce(&RerankContext<'_>) -> T) -> T {
        let names = BTreeMap::new();
        let exemplar = Exemplar::default();
        f(&RerankContext {
            query: "q",
            names: &names,
            exemplar: &exemplar,
        })
    }

    #[test]
    fn chunking_rule() {
        assert_eq!(chunk_sizes(100, 10), vec![10; 10]);
        assert_eq!(chunk_sizes(11, 3), vec![4, 4, 3]);
        assert_eq!(chunk_sizes(2, 3), vec![1, 1, 0]);
    }

    #[test]
    fn identity_layer_keeps_shuffled_chunk_heads() {
        let cands = ids(100);
        let trace = with_ctx(|ctx| {
            run_layer(&cands, LayerSpec::new(10, 5), &IdentityRanker, ctx, 10, &mut repetition_rng(7, 0)).unwrap()
        });
        let mut shuffled = cands.clone();
        shuffle(&mut shuffled, &mut repetition_rng(7, 0));
        let expected: Vec<SourceId> = shuffled.chunks(10).flat_map(|c| c[..5].to_vec()).collect();
        assert_eq!(trace.retained, expected);
        assert_eq!(trace.retained.len(), 50);
        assert_eq!(trace.groups.len(), 10);
    }

    #[test]
    fn keep_all_layer() {
        let cands = ids(10);
        let trace = with_ctx(|ctx| {
            run_layer(&cands, LayerSpec::new(1, 10), &IdentityRanker, ctx, 10, &mut repetition_rng(1, 0)).unwrap()
        });
        let mut got = trace.retained.clone();
        got.sort();
        assert_eq!(got, cands);
    }

    #[test]
    fn layer_errors() {
        with_ctx(|ctx| {
            let mut rng = repetition_rng(0, 0);
            assert_eq!(
                run_layer(&[], LayerSpec::new(1, 1), &IdentityRanker, ctx, 10, &mut rng),
                Err(FilterError::EmptyCandidates)
            );
            assert_eq!(
                run_layer(&[id("a"), id("a")], LayerSpec::new(1, 1), &IdentityRanker, ctx, 10, &mut rng),
                Err(FilterError::DuplicateCandidate(id("a")))
            );
            assert!(matches!(
                run_layer(&ids(10), LayerSpec::new(5, 3), &IdentityRanker, ctx, 10, &mut rng),
                Err(FilterError::KeepTooLarge { max: 2, .. })
            ));
            assert!(matches!(
                run_layer(&ids(20), LayerSpec::new(1, 3), &IdentityRanker, ctx, 10, &mut rng),
                Err(FilterError::GroupTooLarge { size: 20, limit: 10 })
            ));
        });
    }

    struct Failing;
    impl Ranker for Failing {
        fn rerank(&self, _r: &RerankRequest) -> Result<RerankResponse, RerankError> {
            Err(RerankError::Endpoint {
                attempts: vec!["attempt 1: HTTP 503".into()],
            })
        }
    }

    #[test]
    fn ranker_failure_falls_back_to_shuffled_order() {
        let cands = ids(20);
        let trace = with_ctx(|ctx| {
            run_layer(&cands, LayerSpec::new(2, 3), &Failing, ctx, 10, &mut repetition_rng(3, 0)).unwrap()
        });
        for g in &trace.groups {
            assert_eq!(g.members, g.reranked);
            assert!(g.fallback.as_deref().unwrap().contains("503"));
        }
        assert_eq!(trace.retained.len(), 6);
    }

    #[test]
    fn oracle_single_relevant_survives() {
        let cands = ids(100);
        let gold = cands[37].clone();
        let ranker = OracleRanker {
            relevance: RelevanceTable::from([(gold.clone(), 1.0)]),
        };
        let config = FilterConfig {
            seed: 11,
            ..FilterConfig::default()
        };
        let trace = with_ctx(|ctx| run_filter(&cands, &config, &ranker, ctx).unwrap());
        for rep in &trace.repetitions {
            for layer in &rep.layers {
                assert!(layer.retained.contains(&gold));
            }
        }
        assert_eq!(aggregate_most_frequent(&trace, 20).to_sources()[0], gold);
    }

    #[test]
    fn paper_configuration_shapes() {
        let cands = ids(100);
        let config = FilterConfig::default();
        let trace = with_ctx(|ctx| run_filter(&cands, &config, &IdentityRanker, ctx).unwrap());
        assert_eq!(trace.repetitions.len(), 20);
        for rep in &trace.repetitions {
            assert_eq!(rep.layers[0].retained.len(), 50);
            assert_eq!(rep.layers[1].retained.len(), 10);
        }
    }

    #[test]
    fn single_layer_single_rep_is_plain_rerank() {
        let cands = ids(8);
        let ranker = OracleRanker {
            relevance: cands.iter().enumerate().map(|(i, s)| (s.clone(), i as f64)).collect(),
        };
        let config = FilterConfig {
            layers: vec![LayerSpec::new(1, 3)],
            repetitions: 1,
            output_k: 3,
            ..FilterConfig::default()
        };
        let trace = with_ctx(|ctx| run_filter(&cands, &config, &ranker, ctx).unwrap());
        assert_eq!(trace.repetitions[0].layers[0].retained, vec![cands[7].clone(), cands[6].clone(), cands[5].clone()]);
        assert_eq!(aggregate_most_frequent(&trace, 3).to_sources(), vec![cands[7].clone(), cands[6].clone(), cands[5].clone()]);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let cands = ids(100);
        let par = FilterConfig::default();
        let seq = FilterConfig {
            parallel: false,
            ..FilterConfig::default()
        };
        with_ctx(|ctx| {
            assert_eq!(
                run_filter(&cands, &par, &IdentityRanker, ctx).unwrap(),
                run_filter(&cands, &seq, &IdentityRanker, ctx).unwrap()
            );
        });
    }

    fn hand_trace(final_sets: &[&[&str]]) -> RunTrace {
        RunTrace {
            layers: vec![LayerSpec::new(1, 2)],
            repetitions: final_sets
                .iter()
                .enumerate()
                .map(|(r, set)| {
                    let retained: Vec<SourceId> = set.iter().map(|s| id(s)).collect();
                    RepetitionTrace {
                        repetition: r,
                        layers: vec![LayerTrace {
                            groups: vec![GroupTrace {
                                members: retained.clone(),
                                reranked: retained.clone(),
                                repaired: false,
                                repair_notes: vec![],
                                fallback: None,
                            }],
                            retained,
                        }],
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn most_frequent_counts() {
        let trace = hand_trace(&[&["A", "B"], &["A", "C"], &["A", "B"]]);
        let out = aggregate_most_frequent(&trace, 2);
        assert_eq!(out.to_sources(), [id("A"), id("B")]);
        assert_eq!(out.items()[0].score, Some(3.0));
        assert_eq!(out.items()[1].score, Some(2.0));
    }

    #[test]
    fn most_frequent_identical_sets_keep_final_order() {
        let trace = hand_trace(&[&["C", "A"], &["C", "A"]]);
        assert_eq!(aggregate_most_frequent(&trace, 5).to_sources(), [id("C"), id("A")]);
    }

    #[test]
    fn most_frequent_tie_broken_by_mean_position() {
        // A and B both appear twice; A averages position 0.5, B 1.0... B first in rep 0 only.
        let trace = hand_trace(&[&["B", "A"], &["A", "B"], &["A", "C"], &["C", "B"]]);
        let out = aggregate_most_frequent(&trace, 3);
        // counts: A 3, B 3, C 2; A positions 1,0,0 = 1/3, B positions 0,1,1 = 2/3
        assert_eq!(out.to_sources(), [id("A"), id("B"), id("C")]);
        let trace = hand_trace(&[&["B", "A"], &["A", "X"], &["B", "Y"], &["A", "Z"], &["Q", "B"]]);
        // A: 3 appearances at 1,0,0; B: 3 at 0,0,1 -> equal mean 1/3, then id
        assert_eq!(aggregate_most_frequent(&trace, 2).to_sources(), [id("A"), id("B")]);
    }

    fn two_layer_trace() -> RunTrace {
        // 20 repetitions; A survives layer 1 every time and layer 2 in half of them.
        let mut reps = Vec::new();
        for r in 0..20 {
            let l1 = vec![id("A"), id("B"), id("C")];
            let l2 = if r % 2 == 0 { vec![id("A")] } else { vec![id("B")] };
            let g = |v: &Vec<SourceId>| GroupTrace {
                members: v.clone(),
                reranked: v.clone(),
                repaired: false,
                repair_notes: vec![],
                fallback: None,
            };
            reps.push(RepetitionTrace {
                repetition: r,
                layers: vec![
                    LayerTrace {
                        groups: vec![g(&l1)],
                        retained: l1.clone(),
                    },
                    LayerTrace {
                        groups: vec![g(&l2)],
                        retained: l2.clone(),
                    },
                ],
            });
        }
        RunTrace {
            layers: vec![LayerSpec::new(1, 3), LayerSpec::new(1, 1)],
            repetitions: reps,
        }
    }

    #[test]
    fn layer_weighted_score() {
        let trace = two_layer_trace();
        let out = aggregate_layer_weighted(&trace, &[0.25, 0.75], 3).unwrap();
        let a = out.items().iter().find(|i| i.source == id("A")).unwrap();
        assert!((a.score.unwrap() - 0.625).abs() < 1e-12);
        // C survives only layer 1: 0.25
        assert_eq!(out.to_sources(), [id("A"), id("B"), id("C")]);
        assert!((out.items()[2].score.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights() {
        let trace = two_layer_trace();
        let last_only = aggregate_layer_weighted(&trace, &[0.0, 1.0], 5).unwrap();
        assert_eq!(last_only.to_sources(), aggregate_most_frequent(&trace, 5).to_sources());
        let first_only = aggregate_layer_weighted(&trace, &[1.0, 0.0], 5).unwrap();
        // all three tie on layer-1 frequency; A and B have final positions, C does not
        assert_eq!(first_only.to_sources(), [id("A"), id("B"), id("C")]);
        assert_eq!(
            aggregate_layer_weighted(&trace, &[1.0], 5),
            Err(FilterError::WeightMismatch { weights: 1, layers: 2 })
        );
    }

    #[test]
    fn config_validation_and_toml() {
        let cfg = FilterConfig::from_toml(
            r#"
            repetitions = 20
            strategy = "layer_weighted"
            layer_weights = [0.25, 0.75]
            output_k = 20
            seed = 42

            [[layers]]
            groups = 10
            keep_per_group = 5

            [[layers]]
            groups = 5
            keep_per_group = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.layers, vec![LayerSpec::new(10, 5), LayerSpec::new(5, 2)]);
        assert_eq!(cfg.group_size_limit, 10);
        let bad = FilterConfig {
            strategy: Strategy::LayerWeighted,
            layer_weights: vec![0.5, 0.6],
            ..FilterConfig::default()
        };
        assert!(matches!(bad.validate(), Err(FilterError::InvalidConfig(_))));
        let bad = FilterConfig {
            repetitions: 0,
            ..FilterConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trace_jsonl_has_one_line_per_layer() {
        let trace = two_layer_trace();
        let mut buf = Vec::new();
        trace.write_jsonl("q1", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 40);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["query_id"], "q1");
        assert_eq!(first["layer"], 0);
    }
}
