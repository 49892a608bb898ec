//! Listwise rerankers behind one interface.
//!
//! A [`Ranker`] receives a query with up to a group's worth of named
//! candidates and returns a permutation of them. The chat-endpoint ranker
//! drives a one-shot prompt; identity, oracle and noisy-oracle rankers are
//! deterministic stand-ins for tests and simulation.

mod endpoint;
mod parse;
mod prompt;

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::SourceId;
use crate::retrieval::RankedList;

pub use endpoint::{
    ChatConfig, ChatMessage, ChatRanker, ChatRequestBody, ChatTransport, HttpTransport, RecordingTransport,
    ReplayRecord, ReplayTransport, TransportError, API_KEY_ENV, ENDPOINT_URL_ENV,
};
pub use parse::parse_ranking;
pub use prompt::{build_prompt, estimate_tokens, python_list, PromptConfig};

pub const DEFAULT_GROUP_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("a rerank request needs at least one candidate")]
    EmptyRequest,
    #[error("{got} candidates exceed the group size limit of {limit}")]
    GroupTooLarge { got: usize, limit: usize },
    #[error("duplicate candidate name {0:?}")]
    DuplicateName(String),
    #[error("duplicate candidate source {0}")]
    DuplicateSource(SourceId),
    #[error("prompt needs about {estimated} tokens, over the budget of {budget}")]
    PromptTooLong { estimated: usize, budget: usize },
    #[error("endpoint failed after {} attempt(s): {}", attempts.len(), attempts.join("; "))]
    Endpoint { attempts: Vec<String> },
    #[error("endpoint is not configured: {0}")]
    NotConfigured(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub source: SourceId,
    pub name: String,
}

/// The one-shot demonstration embedded in every prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub query: String,
    pub candidates: Vec<String>,
    pub reranked: Vec<String>,
}

impl Default for Exemplar {
    fn default() -> Self {
        let candidates: Vec<String> = [
            "National Weather Service",
            "Harbor City Council",
            "Dr. Maria Alvarez",
            "Coastal Engineering Institute",
            "Regional Transit Authority",
            "Emergency Management Agency",
            "Professor Daniel Okafor",
            "State Department of Agriculture",
            "Local Fishermen's Association",
            "City Parks Department",
        ]
        .map(String::from)
        .to_vec();
        let order = [0, 5, 3, 6, 2, 1, 9, 4, 8, 7];
        Exemplar {
            query: "Storm surge threatens low-lying coastal neighbourhoods ahead of weekend".into(),
            reranked: order.iter().map(|&i| candidates[i].clone()).collect(),
            candidates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub query: String,
    pub candidates: Vec<Candidate>,
    pub exemplar: Exemplar,
}

impl RerankRequest {
    pub fn new(
        query: impl Into<String>,
        candidates: Vec<Candidate>,
        exemplar: Exemplar,
        group_limit: usize,
    ) -> Result<Self, RerankError> {
        if candidates.is_empty() {
            return Err(RerankError::EmptyRequest);
        }
        if candidates.len() > group_limit {
            return Err(RerankError::GroupTooLarge {
                got: candidates.len(),
                limit: group_limit,
            });
        }
        let mut names = HashSet::new();
        let mut sources = HashSet::new();
        for c in &candidates {
            if !names.insert(parse::normalize_name(&c.name)) {
                return Err(RerankError::DuplicateName(c.name.clone()));
            }
            if !sources.insert(&c.source) {
                return Err(RerankError::DuplicateSource(c.source.clone()));
            }
        }
        Ok(RerankRequest {
            query: query.into(),
            candidates,
            exemplar,
        })
    }

    pub fn sources(&self) -> Vec<SourceId> {
        self.candidates.iter().map(|c| c.source.clone()).collect()
    }

    /// Stable identifier over the query and candidate order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.query.as_bytes());
        for c in &self.candidates {
            h.update([0u8]);
            h.update(c.source.as_str().as_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankResponse {
    pub ranking: RankedList,
    pub raw: String,
    pub repaired: bool,
    pub repair_notes: Vec<String>,
}

impl RerankResponse {
    fn clean(order: Vec<SourceId>) -> Self {
        RerankResponse {
            ranking: RankedList::from_order(order).expect("request candidates are distinct"),
            raw: String::new(),
            repaired: false,
            repair_notes: Vec::new(),
        }
    }
}

pub trait Ranker: Send + Sync {
    fn rerank(&self, request: &RerankRequest) -> Result<RerankResponse, RerankError>;
}

impl<R: Ranker + ?Sized> Ranker for Box<R> {
    fn rerank(&self, request: &RerankRequest) -> Result<RerankResponse, RerankError> {
        (**self).rerank(request)
    }
}

impl<R: Ranker + ?Sized> Ranker for &R {
    fn rerank(&self, request: &RerankRequest) -> Result<RerankResponse, RerankError> {
        (**self).rerank(request)
    }
}

/// Returns candidates in request order.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRanker;

impl Ranker for IdentityRanker {
    fn rerank(&self, request: &RerankRequest) -> Result<RerankResponse, RerankError> {
        Ok(RerankResponse::clean(request.sources()))
    }
}

pub type RelevanceTable = BTreeMap<SourceId, f64>;

fn oracle_order(request: &RerankRequest, relevance: &RelevanceTable) -> Vec<SourceId> {
    let mut order = request.sources();
    // stable: ties keep request order
    order.sort_by(|a, b| {
        let ra = relevance.get(a).copied().unwrap_or(0.0);
        let rb = relevance.get(b).copied().unwrap_or(0.0);
        rb.total_cmp(&ra)
    });
    order
}

/// Sorts candidates by descending relevance; unknown sources count as 0.
#[derive(Clone, Debug, Default)]
pub struct OracleRanker {
    pub relevance: RelevanceTable,
}

impl Ranker for OracleRanker {
    fn rerank(&self, request: &RerankRequest) -> Result<RerankResponse, RerankError> {
        Ok(RerankResponse::clean(oracle_order(request, &self.relevance)))
    }
}

/// Where a noisy oracle's mistakes land.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum NoiseBias {
    /// A mistake at position i swaps it with position i + 1.
    #[default]
    Uniform,
    /// A mistake at position i swaps it with a later candidate drawn with
    /// probability proportional to (1 + popularity).
    Popularity(BTreeMap<SourceId, u64>),
}

/// The oracle order disturbed by seeded swaps. Each position of the oracle
/// order is corrupted independently with probability `error_rate`. The
/// random stream is derived from the seed and the request digest, so the
/// same request always yields the same order.
#[derive(Clone, Debug)]
pub struct NoisyOracleRanker {
    pub relevance: RelevanceTable,
    pub error_rate: f64,
    pub seed: u64,
    pub bias: NoiseBias,
}

impl Ranker for NoisyOracleRanker {
    fn rerank(&self, request: &RerankRequest) -> Result<RerankResponse, RerankError> {
        let mut order = oracle_order(request, &self.relevance);
        let digest = request.digest();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(word));
        let n = order.len();
        for i in 0..n.saturating_sub(1) {
            if !rng.gen_bool(self.error_rate.clamp(0.0, 1.0)) {
                continue;
            }
            let j = match &self.bias {
                NoiseBias::Uniform => i + 1,
                NoiseBias::Popularity(pop) => {
                    let weights: Vec<f64> = order[i + 1..]
                        .iter()
                        .map(|s| 1.0 + pop.get(s).copied().unwrap_or(0) as f64)
                        .collect();
                    let mut pick = rng.gen::<f64>() * weights.iter().sum::<f64>();
                    let mut j = n - 1;
                    for (off, w) in weights.iter().enumerate() {
                        if pick < *w {
                            j = i + 1 + off;
                            break;
                        }
                        pick -= w;
                    }
                    j
                }
            };
            order.swap(i, j);
        }
        Ok(RerankResponse::clean(order))
    }
}

/// Configuration-level description of a ranker.
#[derive(Debug)]
pub enum RankerKind {
    Identity,
    Oracle(RelevanceTable),
    NoisyOracle {
        relevance: RelevanceTable,
        error_rate: f64,
        seed: u64,
        bias: NoiseBias,
    },
    ChatEndpoint(Box<ChatRanker>),
}

impl RankerKind {
    pub fn into_ranker(self) -> Box<dyn Ranker> {
        match self {
            RankerKind::Identity => Box::new(IdentityRanker),
            RankerKind::Oracle(relevance) => Box::new(OracleRanker { relevance }),
            RankerKind::NoisyOracle {
                relevance,
                error_rate,
                seed,
                bias,
            } => Box::new(NoisyOracleRanker {
                relevance,
                error_rate,
                seed,
                bias,
            }),
            RankerKind::ChatEndpoint(chat) => chat,
        }
    }
}

pub fn rerank(request: &RerankRequest, ranker: &dyn Ranker) -> Result<RerankResponse, RerankError> {
    ranker.rerank(request)
}
