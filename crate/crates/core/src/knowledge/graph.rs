use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::content_tokens;
use crate::dialogue::{MetaKnowledge, Triple};
use crate::error::{Error, Result};

/// Triple store with case-insensitive entity lookup.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    entities: BTreeSet<String>,
    /// Lowercased entity tokens → incident triple indices (ascending).
    adjacency: HashMap<Vec<String>, Vec<usize>>,
    /// First token → entity token sequences starting with it, longest first.
    by_first: HashMap<String, Vec<Vec<String>>>,
}

impl KnowledgeGraph {
    pub fn new(triples: Vec<Triple>) -> Result<Self> {
        let mut entities = BTreeSet::new();
        let mut adjacency: HashMap<Vec<String>, Vec<usize>> = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            for e in [&t.head, &t.tail] {
                let key = content_tokens(e);
                if key.is_empty() {
                    return Err(Error::Config(format!("triple {i} has an entity with no word tokens")));
                }
                entities.insert(e.clone());
                let list = adjacency.entry(key).or_default();
                if list.last() != Some(&i) {
                    list.push(i);
                }
            }
        }
        let mut by_first: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for key in adjacency.keys() {
            by_first.entry(key[0].clone()).or_default().push(key.clone());
        }
        for list in by_first.values_mut() {
            list.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        }
        let g = Self {
            triples,
            entities,
            adjacency,
            by_first,
        };
        g.verify()?;
        Ok(g)
    }

    /// Every triple is listed under both of its entities.
    fn verify(&self) -> Result<()> {
        for (i, t) in self.triples.iter().enumerate() {
            for e in [&t.head, &t.tail] {
                let listed = self
                    .adjacency
                    .get(&content_tokens(e))
                    .is_some_and(|l| l.binary_search(&i).is_ok());
                if !listed {
                    return Err(Error::Config(format!("adjacency misses triple {i}")));
                }
            }
        }
        Ok(())
    }

    /// One `head<TAB>relation<TAB>tail` triple per line; blank lines skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut triples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
            match parts[..] {
                [h, r, t] if !h.is_empty() && !r.is_empty() && !t.is_empty() => {
                    triples.push(Triple::new(h, r, t))
                }
                _ => return Err(Error::parse(i + 1, "expected head<TAB>relation<TAB>tail")),
            }
        }
        Self::new(triples)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    /// Entities mentioned in `utterance`, scanning left to right and taking
    /// the longest entity that starts at each position. Returned as
    /// lowercased token sequences in mention order, deduplicated.
    pub fn match_entities(&self, utterance: &str) -> Vec<Vec<String>> {
        let toks = content_tokens(utterance);
        let mut found: Vec<Vec<String>> = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let hit = self.by_first.get(&toks[i]).and_then(|cands| {
                cands
                    .iter()
                    .find(|c| toks.len() - i >= c.len() && toks[i..i + c.len()] == c[..])
            });
            match hit {
                Some(e) => {
                    if !found.contains(e) {
                        found.push(e.clone());
                    }
                    i += e.len();
                }
                None => i += 1,
            }
        }
        found
    }

    /// All triples incident to an entity mentioned in `utterance`, in graph
    /// order without duplicates; `None` when nothing matches.
    pub fn neighbors(&self, utterance: &str) -> MetaKnowledge {
        let mut ids: BTreeSet<usize> = BTreeSet::new();
        for e in self.match_entities(utterance) {
            ids.extend(&self.adjacency[&e]);
        }
        let mut triples: Vec<Triple> = Vec::with_capacity(ids.len());
        for i in ids {
            let t = &self.triples[i];
            if !triples.contains(t) {
                triples.push(t.clone());
            }
        }
        if triples.is_empty() {
            MetaKnowledge::None
        } else {
            MetaKnowledge::Graph { triples }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> KnowledgeGraph {
        KnowledgeGraph::from_tsv(
            "Steve Kerr\tTeam coached\tGolden State Warriors\n\
             Golden State Warriors\tPlays\tBasketball\n\
             Golden State\tNickname of\tCalifornia\n\
             Stephen Curry\tPlays for\tGolden State Warriors\n\
             \n\
             Steve Kerr\tTeam coached\tGolden State Warriors\n",
        )
        .unwrap()
    }

    #[test]
    fn motivation_example() {
        let m = graph().neighbors("Do you like the Golden State Warriors?");
        let MetaKnowledge::Graph { triples } = m else {
            panic!("expected triples")
        };
        assert_eq!(triples[0], Triple::new("Steve Kerr", "Team coached", "Golden State Warriors"));
        // longest match wins over "Golden State"; duplicate line collapsed
        assert_eq!(triples.len(), 3);
    }

    #[test]
    fn casing_and_punctuation_do_not_matter() {
        let g = graph();
        assert_eq!(g.neighbors("golden state warriors"), g.neighbors("GOLDEN STATE WARRIORS!!"));
    }

    #[test]
    fn no_entity_is_none() {
        assert!(graph().neighbors("what a lovely day").is_none());
    }

    #[test]
    fn multiple_entities_union_in_graph_order() {
        let g = graph();
        let MetaKnowledge::Graph { triples } = g.neighbors("basketball and steve kerr") else {
            panic!()
        };
        assert_eq!(triples[0].head, "Steve Kerr");
        assert_eq!(triples[1].tail, "Basketball");
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = KnowledgeGraph::from_tsv("a\tb\tc\nbroken line\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
