//! Synthetic multi-skill dialogue corpora: suite specs, generation, splits
//! and the line-delimited corpus file format.

mod spec;
mod synth;

pub use spec::{
    placeholders, render, Exchange, ExchangeBlock, Family, KnowledgeSource, Resources, SkillSpec, SuiteSpec,
    REFERENCE_FILES,
};
pub use synth::{skill_vocabulary, synth, synth_suite, Suite};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::{DialogueHistory, MetaKnowledge};
use crate::error::{Error, Result};

/// One response to predict: the history up to and including a user turn,
/// the knowledge for that turn, and the gold system reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnExample {
    pub skill: String,
    pub dialogue_id: String,
    /// Index of the gold response within its dialogue (1, 3, ...).
    pub turn_index: usize,
    pub history: DialogueHistory,
    pub meta: MetaKnowledge,
    pub gold_response: String,
    pub gold_entities: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// 80/10/10 assignment from a hash of the dialogue id, so every turn of a
/// dialogue lands in the same split.
pub fn split_of(dialogue_id: &str) -> Split {
    let d = Sha256::digest(dialogue_id.as_bytes());
    match u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkillDataset {
    pub skill: String,
    pub examples: Vec<TurnExample>,
}

impl SkillDataset {
    pub fn split(&self, split: Split) -> Vec<&TurnExample> {
        self.examples
            .iter()
            .filter(|e| split_of(&e.dialogue_id) == split)
            .collect()
    }

    pub fn n_dialogues(&self) -> usize {
        let mut ids: Vec<&str> = self.examples.iter().map(|e| e.dialogue_id.as_str()).collect();
        ids.dedup();
        ids.len()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.examples)
    }
}

fn to_jsonl(examples: &[TurnExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("example serializes"));
        out.push('\n');
    }
    out
}

/// Parses a corpus file into per-skill datasets in first-appearance order.
pub fn parse_corpus(text: &str) -> Result<Vec<SkillDataset>> {
    let mut out: Vec<SkillDataset> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: TurnExample = serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        ex.history
            .validate_for_response()
            .and_then(|_| ex.meta.validate())
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        match out.iter_mut().find(|d| d.skill == ex.skill) {
            Some(d) => d.examples.push(ex),
            None => out.push(SkillDataset {
                skill: ex.skill.clone(),
                examples: vec![ex],
            }),
        }
    }
    Ok(out)
}

pub fn corpus_to_jsonl(datasets: &[SkillDataset]) -> String {
    datasets.iter().map(SkillDataset::to_jsonl).collect()
}

pub fn save_corpus(datasets: &[SkillDataset], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, corpus_to_jsonl(datasets))?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SkillDataset>> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions_roughly_80_10_10() {
        let mut counts = [0usize; 3];
        for i in 0..5000 {
            counts[split_of(&format!("d-{i:04}")) as usize] += 1;
        }
        assert!((3800..4200).contains(&counts[0]), "{counts:?}");
        assert!((400..600).contains(&counts[1]), "{counts:?}");
        assert!((400..600).contains(&counts[2]), "{counts:?}");
    }

    #[test]
    fn malformed_line_is_reported() {
        let err = parse_corpus("\n{not json").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
