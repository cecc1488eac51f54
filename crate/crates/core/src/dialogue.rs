//! Dialogue turns and per-turn external knowledge.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a registered adapter stack; the first registered skill is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillId(pub u32);

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::System,
            text: text.into(),
        }
    }
}

/// Alternating user/system turns, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueHistory(pub Vec<Utterance>);

impl DialogueHistory {
    pub fn new(turns: Vec<Utterance>) -> Self {
        Self(turns)
    }

    pub fn turns(&self) -> &[Utterance] {
        &self.0
    }

    pub fn push(&mut self, u: Utterance) {
        self.0.push(u);
    }

    pub fn last_user(&self) -> Option<&Utterance> {
        self.0.iter().rev().find(|u| u.speaker == Speaker::User)
    }

    /// Nonempty texts, alternating speakers.
    pub fn validate(&self) -> Result<()> {
        for (i, u) in self.0.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(Error::Contract(format!("turn {i} has empty text")));
            }
            if i > 0 && self.0[i - 1].speaker == u.speaker {
                return Err(Error::Contract(format!("turns {} and {i} share a speaker", i - 1)));
            }
        }
        Ok(())
    }

    /// Valid, nonempty, and ending on a user turn.
    pub fn validate_for_response(&self) -> Result<()> {
        self.validate()?;
        match self.0.last() {
            Some(u) if u.speaker == Speaker::User => Ok(()),
            Some(_) => Err(Error::Contract("history must end with a user turn".into())),
            None => Err(Error::Contract("history is empty".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableRow {
    pub slot: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// External knowledge attached to a turn.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum MetaKnowledge {
    #[default]
    None,
    Text {
        paragraph: String,
    },
    Table {
        rows: Vec<TableRow>,
    },
    Graph {
        triples: Vec<Triple>,
    },
}

impl MetaKnowledge {
    pub fn text(paragraph: impl Into<String>) -> Self {
        Self::Text {
            paragraph: paragraph.into(),
        }
    }

    pub fn table<S: Into<String>>(rows: impl IntoIterator<Item = (S, S)>) -> Self {
        Self::Table {
            rows: rows
                .into_iter()
                .map(|(slot, value)| TableRow {
                    slot: slot.into(),
                    value: value.into(),
                })
                .collect(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Text { .. } => "text",
            Self::Table { .. } => "table",
            Self::Graph { .. } => "graph",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Text { paragraph } if paragraph.trim().is_empty() => {
                Err(Error::Contract("text knowledge is empty".into()))
            }
            Self::Text { .. } => Ok(()),
            Self::Table { rows } => {
                let mut seen = HashSet::new();
                for r in rows {
                    if !seen.insert(r.slot.as_str()) {
                        return Err(Error::Contract(format!("duplicate table slot {:?}", r.slot)));
                    }
                }
                Ok(())
            }
            Self::Graph { triples } => {
                for t in triples {
                    if [&t.head, &t.relation, &t.tail].iter().any(|s| s.trim().is_empty()) {
                        return Err(Error::Contract(format!("malformed triple {t:?}")));
                    }
                }
                Ok(())
            }
        }
    }

    /// Flat text form fed to the model: text verbatim, tables as
    /// "slot is value" clauses, graphs as "head relation tail" clauses.
    pub fn linearize(&self) -> Option<String> {
        match self {
            Self::None => None,
            Self::Text { paragraph } => Some(paragraph.clone()),
            Self::Table { rows } if rows.is_empty() => None,
            Self::Table { rows } => Some(
                rows.iter()
                    .map(|r| format!("{} is {}", r.slot, r.value))
                    .collect::<Vec<_>>()
                    .join(" , "),
            ),
            Self::Graph { triples } if triples.is_empty() => None,
            Self::Graph { triples } => Some(
                triples
                    .iter()
                    .map(|t| format!("{} {} {}", t.head, t.relation, t.tail))
                    .collect::<Vec<_>>()
                    .join(" , "),
            ),
        }
    }
}
