//! News source recommendation: expert-finding retrieval over historical
//! quotes, refined by a stochastic multi-layer listwise reranking filter,
//! with an evaluation harness.

pub mod corpus;
pub mod index;
pub mod retrieval;
pub mod reranker;
pub mod mlrf;
pub mod metrics;
pub mod synth;
pub mod pipeline;
