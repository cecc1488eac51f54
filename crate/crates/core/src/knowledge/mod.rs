//! Knowledge sources that turn a user utterance into [`MetaKnowledge`]:
//! TF-IDF document retrieval, knowledge-graph neighbors and a fixture-backed
//! slot API.
//!
//! [`MetaKnowledge`]: crate::dialogue::MetaKnowledge

mod api;
mod graph;
mod tfidf;

pub use api::{ApiFixture, FixtureRow};
pub use graph::KnowledgeGraph;
pub use tfidf::{Document, DocumentIndex};

use crate::tokenizer::normalize;

/// Normalized tokens with punctuation removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    normalize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

/// Reads line-delimited records, skipping blank lines; errors name the line.
pub(crate) fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> crate::Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| crate::Error::parse(i + 1, e.to_string())))
        .collect()
}
