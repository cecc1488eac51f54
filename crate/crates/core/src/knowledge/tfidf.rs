use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{content_tokens, parse_jsonl};
use crate::dialogue::MetaKnowledge;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u32,
    pub title: String,
    pub first_paragraph: String,
    pub full_text: String,
}

/// Sparse TF-IDF index over unigrams and bigrams of `title + full_text`.
///
/// `tf = 1 + ln(count)`, `idf = ln((N + 1) / (df + 1)) + 1`; document
/// vectors are L2-normalized.
#[derive(Clone, Debug)]
pub struct DocumentIndex {
    docs: Vec<Document>,
    terms: HashMap<String, usize>,
    idf: Vec<f64>,
    /// Per document, `(term index, weight)` sorted by term index.
    vectors: Vec<Vec<(usize, f64)>>,
}

/// Unigram and bigram counts.
pub(crate) fn term_counts(text: &str) -> BTreeMap<String, usize> {
    let toks = content_tokens(text);
    let mut counts = BTreeMap::new();
    for t in &toks {
        *counts.entry(t.clone()).or_insert(0) += 1;
    }
    for w in toks.windows(2) {
        *counts.entry(format!("{} {}", w[0], w[1])).or_insert(0) += 1;
    }
    counts
}

fn normalize_vec(v: &mut [(usize, f64)]) {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in v.iter_mut() {
            *w /= norm;
        }
    }
}

impl DocumentIndex {
    pub fn build(docs: Vec<Document>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if let Some(d) = docs.iter().find(|d| !seen.insert(d.id)) {
            return Err(Error::Config(format!("duplicate document id {}", d.id)));
        }
        let counts: Vec<BTreeMap<String, usize>> = docs
            .iter()
            .map(|d| term_counts(&format!("{} {}", d.title, d.full_text)))
            .collect();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &counts {
            for term in c.keys() {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        let n = docs.len() as f64;
        let mut terms = HashMap::with_capacity(df.len());
        let mut idf = Vec::with_capacity(df.len());
        for (i, (term, d)) in df.iter().enumerate() {
            terms.insert(term.to_string(), i);
            idf.push(((n + 1.0) / (*d as f64 + 1.0)).ln() + 1.0);
        }
        let vectors = counts
            .iter()
            .map(|c| {
                let mut v: Vec<(usize, f64)> = c
                    .iter()
                    .map(|(t, &k)| {
                        let i = terms[t];
                        (i, (1.0 + (k as f64).ln()) * idf[i])
                    })
                    .collect();
                v.sort_by_key(|(i, _)| *i);
                normalize_vec(&mut v);
                v
            })
            .collect();
        Ok(Self {
            docs,
            terms,
            idf,
            vectors,
        })
    }

    /// Loads one JSON document record per line.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::build(parse_jsonl(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, id: u32) -> Option<&Document> {
        self.docs.iter().find(|d| d.id == id)
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.terms.get(term).map(|&i| self.idf[i])
    }

    pub fn vocabulary_size(&self) -> usize {
        self.terms.len()
    }

    /// Normalized sparse query vector over in-vocabulary terms.
    fn query_vector(&self, query: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = term_counts(query)
            .into_iter()
            .filter_map(|(t, k)| {
                self.terms
                    .get(&t)
                    .map(|&i| (i, (1.0 + (k as f64).ln()) * self.idf[i]))
            })
            .collect();
        v.sort_by_key(|(i, _)| *i);
        normalize_vec(&mut v);
        v
    }

    /// Documents with a positive cosine score, best first; ties go to the
    /// lower id. Empty when the query shares no term with the index.
    pub fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<(u32, f64)>> {
        if top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        let q = self.query_vector(query);
        if q.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(u32, f64)> = self
            .vectors
            .iter()
            .zip(&self.docs)
            .filter_map(|(v, d)| {
                let s = sparse_dot(&q, v);
                (s > 0.0).then_some((d.id, s.min(1.0)))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        Ok(scored)
    }

    /// First paragraph of the best-scoring document, or `None`.
    pub fn knowledge_for(&self, utterance: &str) -> MetaKnowledge {
        match self.retrieve(utterance, 1).ok().and_then(|r| r.first().copied()) {
            Some((id, _)) => MetaKnowledge::text(&self.doc(id).expect("retrieved id exists").first_paragraph),
            None => MetaKnowledge::None,
        }
    }
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}
