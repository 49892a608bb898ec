//! Query-likelihood expert finding: candidate-based (CER) and
//! document-based (DER) scoring of sources.
//!
//! Scores are natural logs of P(k|e). A zero probability is represented by
//! `f64::NEG_INFINITY`, which orders below every finite score.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceId;
use crate::index::{term_prob_in, Association, Index, Query};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("source {0} is not in the index")]
    UnknownSource(SourceId),
    #[error("top_n must be at least 1")]
    InvalidTopN,
    #[error("unknown retrieval model {0:?} (expected cer or der)")]
    UnknownModel(String),
    #[error("duplicate source {0} in ranked list")]
    DuplicateSource(SourceId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalModel {
    #[serde(rename = "cer", alias = "candidate_based")]
    CandidateBased,
    #[serde(rename = "der", alias = "document_based")]
    DocumentBased,
}

impl FromStr for RetrievalModel {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cer" | "candidate_based" => Ok(RetrievalModel::CandidateBased),
            "der" | "document_based" => Ok(RetrievalModel::DocumentBased),
            other => Err(RetrievalError::UnknownModel(other.to_string())),
        }
    }
}

impl fmt::Display for RetrievalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalModel::CandidateBased => "cer",
            RetrievalModel::DocumentBased => "der",
        })
    }
}

/// Serializes log scores with `null` standing for a zero probability.
pub mod log_score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

mod opt_log_score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => super::log_score_serde::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Some(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSource {
    pub source: SourceId,
    #[serde(with = "log_score_serde")]
    pub log_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub source: SourceId,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_log_score_serde")]
    pub score: Option<f64>,
}

/// An ordered list of distinct sources, optionally scored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList {
    items: Vec<RankedItem>,
}

fn by_score_then_id(a: &ScoredSource, b: &ScoredSource) -> Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then_with(|| a.source.cmp(&b.source))
}

impl RankedList {
    /// Sorts by descending score, breaking ties by source id.
    pub fn from_scored(mut scored: Vec<ScoredSource>) -> Result<Self, RetrievalError> {
        scored.sort_by(by_score_then_id);
        let items = scored
            .into_iter()
            .map(|s| RankedItem {
                source: s.source,
                score: Some(s.log_score),
            })
            .collect();
        RankedList::from_items(items)
    }

    /// Keeps the given order; no scores attached.
    pub fn from_order(order: Vec<SourceId>) -> Result<Self, RetrievalError> {
        RankedList::from_items(
            order
                .into_iter()
                .map(|source| RankedItem { source, score: None })
                .collect(),
        )
    }

    pub fn from_items(items: Vec<RankedItem>) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::with_capacity(items.len());
        for it in &items {
            if !seen.insert(&it.source) {
                return Err(RetrievalError::DuplicateSource(it.source.clone()));
            }
        }
        Ok(RankedList { items })
    }

    pub fn items(&self) -> &[RankedItem] {
        &self.items
    }

    pub fn sources(&self) -> impl Iterator<Item = &SourceId> + '_ {
        self.items.iter().map(|i| &i.source)
    }

    pub fn to_sources(&self) -> Vec<SourceId> {
        self.sources().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.items.truncate(n);
    }

    pub fn top(&self, k: usize) -> &[RankedItem] {
        &self.items[..k.min(self.items.len())]
    }
}

/// Holds the corpus-level constants both models need, so ranking all
/// sources does not recompute them.
#[derive(Clone, Debug)]
pub struct Scorer<'a> {
    index: &'a Index,
    association: Association,
    /// β for the candidate-based model: |d̄| times mean documents per source.
    cer_beta: f64,
    /// β for the document-based model: |d̄|.
    der_beta: f64,
}

impl<'a> Scorer<'a> {
    pub fn new(index: &'a Index, association: Association) -> Self {
        let avg = index.avg_doc_len();
        let linked: usize = index.associations().values().map(|ds| ds.len()).sum();
        Scorer {
            index,
            association,
            cer_beta: avg * linked as f64 / index.n_sources() as f64,
            der_beta: avg,
        }
    }

    pub fn index(&self) -> &Index {
        self.index
    }

    pub fn cer_beta(&self) -> f64 {
        self.cer_beta
    }

    pub fn der_beta(&self) -> f64 {
        self.der_beta
    }

    pub fn score(&self, model: RetrievalModel, query: &Query, source: &SourceId) -> Result<f64, RetrievalError> {
        match model {
            RetrievalModel::CandidateBased => self.cer_score(query, source),
            RetrievalModel::DocumentBased => self.der_score(query, source),
        }
    }

    /// log P(k|e) = Σ_t n(t,k) · ln[(1−λ_e) Σ_d p(t|d) p(d|e) + λ_e p(t)],
    /// λ_e = β / (β + n(e)).
    pub fn cer_score(&self, query: &Query, source: &SourceId) -> Result<f64, RetrievalError> {
        let docs = self
            .index
            .assoc(source)
            .ok_or_else(|| RetrievalError::UnknownSource(source.clone()))?;
        let n_e = self.index.source_tokens(source).unwrap_or(0) as f64;
        let lambda = self.cer_beta / (self.cer_beta + n_e);
        let p_de = match self.association {
            Association::Uniform => 1.0 / docs.len() as f64,
            Association::Boolean => 1.0,
        };
        let all_docs = self.index.docs();
        let mut log_p = 0.0;
        for (term, &count) in &query.terms {
            let source_model: f64 = docs.iter().map(|&d| term_prob_in(&all_docs[d], term) * p_de).sum();
            let mix = (1.0 - lambda) * source_model + lambda * self.index.term_prob_bg(term);
            if mix <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            log_p += count as f64 * mix.ln();
        }
        Ok(log_p)
    }

    /// log P(k|e) = ln Σ_{d ∈ assoc(e)} p(d|e) Π_t [(1−λ_d) p(t|d) + λ_d p(t)]^{n(t,k)},
    /// λ_d = β / (β + n(d)), with the outer sum taken by log-sum-exp.
    pub fn der_score(&self, query: &Query, source: &SourceId) -> Result<f64, RetrievalError> {
        self.der_score_terms(&self.query_terms(query), source)
    }

    /// Query terms paired with their counts and background probabilities.
    fn query_terms<'q>(&self, query: &'q Query) -> Vec<(&'q str, f64, f64)> {
        query
            .terms
            .iter()
            .map(|(t, &c)| (t.as_str(), c as f64, self.index.term_prob_bg(t)))
            .collect()
    }

    fn der_score_terms(&self, terms: &[(&str, f64, f64)], source: &SourceId) -> Result<f64, RetrievalError> {
        let docs = self
            .index
            .assoc(source)
            .ok_or_else(|| RetrievalError::UnknownSource(source.clone()))?;
        let ln_p_de = match self.association {
            Association::Uniform => -(docs.len() as f64).ln(),
            Association::Boolean => 0.0,
        };
        let all_docs = self.index.docs();
        let per_doc: Vec<f64> = docs
            .iter()
            .map(|&d| {
                let doc = &all_docs[d];
                let lambda = self.der_beta / (self.der_beta + doc.len as f64);
                let mut log_p = ln_p_de;
                for &(term, count, bg) in terms {
                    let mix = (1.0 - lambda) * term_prob_in(doc, term) + lambda * bg;
                    if mix <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    log_p += count * mix.ln();
                }
                log_p
            })
            .collect();
        Ok(log_sum_exp(&per_doc))
    }

    /// Scores every indexed source and returns the best `top_n`.
    pub fn rank_sources(&self, query: &Query, model: RetrievalModel, top_n: usize) -> Result<RankedList, RetrievalError> {
        if top_n == 0 {
            return Err(RetrievalError::InvalidTopN);
        }
        let terms = self.query_terms(query);
        let scored = self
            .index
            .sources()
            .map(|e| {
                Ok(ScoredSource {
                    source: e.clone(),
                    log_score: match model {
                        RetrievalModel::CandidateBased => self.cer_score(query, e)?,
                        RetrievalModel::DocumentBased => self.der_score_terms(&terms, e)?,
                    },
                })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        let mut ranked = RankedList::from_scored(scored)?;
        ranked.truncate(top_n);
        Ok(ranked)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn cer_score(index: &Index, query: &Query, source: &SourceId) -> Result<f64, RetrievalError> {
    Scorer::new(index, Association::default()).cer_score(query, source)
}

pub fn der_score(index: &Index, query: &Query, source: &SourceId) -> Result<f64, RetrievalError> {
    Scorer::new(index, Association::default()).der_score(query, source)
}

pub fn rank_sources(index: &Index, query: &Query, model: RetrievalModel, top_n: usize) -> Result<RankedList, RetrievalError> {
    Scorer::new(index, Association::default()).rank_sources(query, model, top_n)
}

/// Exact-rational evaluation of both models over the index counts.
pub mod exact {
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Zero};

    use super::RetrievalError;
    use crate::corpus::SourceId;
    use crate::index::{ratio, Association, Index, Query};

    fn pow(base: &BigRational, exp: u32) -> BigRational {
        (0..exp).fold(BigRational::one(), |acc, _| acc * base)
    }

    pub fn cer_beta(index: &Index) -> BigRational {
        let linked: usize = index.associations().values().map(|ds| ds.len()).sum();
        index.avg_doc_len_exact() * ratio(linked as u64, index.n_sources() as u64)
    }

    pub fn cer_probability(
        index: &Index,
        query: &Query,
        source: &SourceId,
        association: Association,
    ) -> Result<BigRational, RetrievalError> {
        let docs = index
            .assoc(source)
            .ok_or_else(|| RetrievalError::UnknownSource(source.clone()))?;
        let beta = cer_beta(index);
        let n_e = BigRational::from_integer(BigInt::from(index.source_tokens(source).unwrap_or(0)));
        let lambda = &beta / (&beta + n_e);
        let mut p = BigRational::one();
        for (term, &count) in &query.terms {
            let mut source_model = BigRational::zero();
            for &d in docs {
                let doc = &index.docs()[d];
                source_model += index.term_prob_doc_exact(&doc.id, term).expect("doc in index")
                    * index.doc_given_source_exact(source, d, association);
            }
            let mix = (BigRational::one() - &lambda) * source_model + &lambda * index.term_prob_bg_exact(term);
            p *= pow(&mix, count);
        }
        Ok(p)
    }

    pub fn der_probability(
        index: &Index,
        query: &Query,
        source: &SourceId,
        association: Association,
    ) -> Result<BigRational, RetrievalError> {
        let docs = index
            .assoc(source)
            .ok_or_else(|| RetrievalError::UnknownSource(source.clone()))?;
        let beta = index.avg_doc_len_exact();
        let mut total = BigRational::zero();
        for &d in docs {
            let doc = &index.docs()[d];
            let n_d = BigRational::from_integer(BigInt::from(doc.len));
            let lambda = &beta / (&beta + n_d);
            let mut p = index.doc_given_source_exact(source, d, association);
            for (term, &count) in &query.terms {
                let mix = (BigRational::one() - &lambda) * index.term_prob_doc_exact(&doc.id, term).expect("doc in index")
                    + &lambda * index.term_prob_bg_exact(term);
                p *= pow(&mix, count);
            }
            total += p;
        }
        Ok(total)
    }
}
