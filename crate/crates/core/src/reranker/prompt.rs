use serde::{Deserialize, Serialize};

use super::{RerankError, RerankRequest};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Estimated-token ceiling for a rendered prompt.
    pub token_budget: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { token_budget: 8000 }
    }
}

/// Rough token count: one token per four characters.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn quote_name(name: &str) -> String {
    // Python repr rules: single quotes unless the string holds one and no double quote.
    if name.contains('\'') && !name.contains('"') {
        format!("\"{}\"", name.replace('\\', "\\\\"))
    } else {
        format!("'{}'", name.replace('\\', "\\\\").replace('\'', "\\'"))
    }
}

/// Renders names the way Python prints a list of strings.
pub fn python_list<S: AsRef<str>>(names: &[S]) -> String {
    let body: Vec<String> = names.iter().map(|n| quote_name(n.as_ref())).collect();
    format!("[{}]", body.join(", "))
}

pub fn build_prompt(request: &RerankRequest, config: &PromptConfig) -> Result<String, RerankError> {
    let n = request.candidates.len();
    let example_n = request.exemplar.candidates.len();
    let names: Vec<&str> = request.candidates.iter().map(|c| c.name.as_str()).collect();
    let prompt = format!(
        "You are a knowledgeable referrer.\n\
         Given a query and the {n} potential information sources (which may include both individuals and organizations) retrieved based on the query, you need to rank the {n} potential sources in order of relevance to the query, placing the source that is most likely to provide information relevant to the query at the top of the list.\n\
         Return the new rank of sources only in the form of python list (exactly the same form of the given list, just rerank it), please do not provide other words except for the list.\n\
         Here is an example:\n\
         Query: {example_query}.\n\
         {example_n} potential sources are: {example_candidates}, and then the output should be: {example_reranked}.\n\
         Now the query is: {query}. The source candidates are: {candidates}",
        example_query = request.exemplar.query,
        example_candidates = python_list(&request.exemplar.candidates),
        example_reranked = python_list(&request.exemplar.reranked),
        query = request.query,
        candidates = python_list(&names),
    );
    let estimated = estimate_tokens(&prompt);
    if estimated > config.token_budget {
        return Err(RerankError::PromptTooLong {
            estimated,
            budget: config.token_budget,
        });
    }
    Ok(prompt)
}
