//! Exhaustive reference scoring for document retrieval and graph lookup.

use crate::dialogue::Triple;
use crate::knowledge::Document;
use crate::tokenizer::normalize;

fn words(text: &str) -> Vec<String> {
    normalize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

fn terms(text: &str) -> Vec<String> {
    let w = words(text);
    let mut out = w.clone();
    for i in 1..w.len() {
        out.push(format!("{} {}", w[i - 1], w[i]));
    }
    out
}

/// Dense TF-IDF cosine scores for every document, in document order.
pub fn tfidf_scores(docs: &[Document], query: &str) -> Vec<f64> {
    let doc_terms: Vec<Vec<String>> = docs
        .iter()
        .map(|d| terms(&format!("{} {}", d.title, d.full_text)))
        .collect();
    let mut vocab: Vec<String> = doc_terms.iter().flatten().cloned().collect();
    vocab.sort();
    vocab.dedup();
    let n = docs.len() as f64;
    let idf: Vec<f64> = vocab
        .iter()
        .map(|t| {
            let df = doc_terms.iter().filter(|d| d.contains(t)).count() as f64;
            ((n + 1.0) / (df + 1.0)).ln() + 1.0
        })
        .collect();
    let dense = |ts: &[String]| -> Vec<f64> {
        let mut v: Vec<f64> = vocab
            .iter()
            .zip(&idf)
            .map(|(t, w)| {
                let c = ts.iter().filter(|x| *x == t).count();
                if c == 0 {
                    0.0
                } else {
                    (1.0 + (c as f64).ln()) * w
                }
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    };
    let q = dense(&terms(query));
    doc_terms
        .iter()
        .map(|d| dense(d).iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect()
}

/// Index of the best document (lowest id among exact ties), if any scores
/// above zero.
pub fn tfidf_top1(docs: &[Document], query: &str) -> Option<(u32, f64)> {
    let scores = tfidf_scores(docs, query);
    let mut best: Option<(u32, f64)> = None;
    for (d, s) in docs.iter().zip(scores) {
        if s <= 0.0 {
            continue;
        }
        best = match best {
            Some((id, b)) if b > s || (b == s && id < d.id) => Some((id, b)),
            _ => Some((d.id, s)),
        };
    }
    best
}

/// Leftmost-longest entity mentions, found by trying every entity at every
/// position.
pub fn matched_entities(triples: &[Triple], utterance: &str) -> Vec<Vec<String>> {
    let mut ents: Vec<Vec<String>> = Vec::new();
    for t in triples {
        for e in [&t.head, &t.tail] {
            let w = words(e);
            if !ents.contains(&w) {
                ents.push(w);
            }
        }
    }
    let toks = words(utterance);
    let mut out: Vec<Vec<String>> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let mut best: Option<&Vec<String>> = None;
        for e in &ents {
            let fits = i + e.len() <= toks.len() && (0..e.len()).all(|j| toks[i + j] == e[j]);
            if fits && best.is_none_or(|b| e.len() > b.len()) {
                best = Some(e);
            }
        }
        match best {
            Some(e) => {
                if !out.contains(e) {
                    out.push(e.clone());
                }
                i += e.len();
            }
            None => i += 1,
        }
    }
    out
}

/// Every triple touching a matched entity, first occurrence order.
pub fn kg_neighbors(triples: &[Triple], utterance: &str) -> Vec<Triple> {
    let ents = matched_entities(triples, utterance);
    let mut out: Vec<Triple> = Vec::new();
    for t in triples {
        let touches = ents.contains(&words(&t.head)) || ents.contains(&words(&t.tail));
        if touches && !out.contains(t) {
            out.push(t.clone());
        }
    }
    out
}
