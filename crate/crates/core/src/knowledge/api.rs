use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{content_tokens, parse_jsonl};
use crate::dialogue::{MetaKnowledge, TableRow};
use crate::error::{Error, Result};

/// One fixture record: `{"location": ..., "slots": {...}, "default"?: bool}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub location: String,
    pub slots: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub default: bool,
}

/// Offline stand-in for a slot-filling web API such as a weather service.
#[derive(Clone, Debug)]
pub struct ApiFixture {
    pub name: String,
    rows: Vec<FixtureRow>,
    default_row: usize,
    keys: Vec<Vec<String>>,
}

impl ApiFixture {
    /// The row flagged `default` (or the first row) answers queries that
    /// name no known location.
    pub fn new(name: impl Into<String>, rows: Vec<FixtureRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("fixture has no rows".into()));
        }
        let mut keys = Vec::with_capacity(rows.len());
        for r in &rows {
            let key = content_tokens(&r.location);
            if key.is_empty() {
                return Err(Error::Config(format!("fixture location {:?} has no words", r.location)));
            }
            if keys.contains(&key) {
                return Err(Error::Config(format!("duplicate fixture location {:?}", r.location)));
            }
            if let Some((k, v)) = r.slots.iter().find(|(_, v)| !v.is_string()) {
                return Err(Error::Config(format!("slot {k} of {:?} is not a string: {v}", r.location)));
            }
            keys.push(key);
        }
        let defaults: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].default).collect();
        if defaults.len() > 1 {
            return Err(Error::Config("fixture has more than one default row".into()));
        }
        Ok(Self {
            name: name.into(),
            default_row: defaults.first().copied().unwrap_or(0),
            rows,
            keys,
        })
    }

    pub fn from_jsonl(name: impl Into<String>, text: &str) -> Result<Self> {
        Self::new(name, parse_jsonl(text)?)
    }

    pub fn load(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(name, &std::fs::read_to_string(path)?)
    }

    pub fn rows(&self) -> &[FixtureRow] {
        &self.rows
    }

    pub fn default_location(&self) -> &str {
        &self.rows[self.default_row].location
    }

    /// The first fixture location (in file order) whose words occur as a
    /// contiguous run in the utterance, else the default location.
    pub fn locate(&self, utterance: &str) -> &FixtureRow {
        self.locate_named(utterance)
            .unwrap_or(&self.rows[self.default_row])
    }

    /// Like [`locate`](Self::locate) but `None` instead of the default row.
    pub fn locate_named(&self, utterance: &str) -> Option<&FixtureRow> {
        let toks = content_tokens(utterance);
        self.keys
            .iter()
            .position(|k| toks.windows(k.len()).any(|w| w == &k[..]))
            .map(|i| &self.rows[i])
    }

    pub fn query(&self, utterance: &str) -> MetaKnowledge {
        let row = self.locate(utterance);
        MetaKnowledge::Table {
            rows: row
                .slots
                .iter()
                .map(|(k, v)| TableRow {
                    slot: k.clone(),
                    value: v.as_str().expect("validated on load").to_string(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"location":"Paris","slots":{"Weather":"Rainy","High":"18 C","Low":"11 C"}}
{"location":"Hong Kong","slots":{"Weather":"Sunny","High":"32 C","Low":"27 C"},"default":true}
"#;

    #[test]
    fn named_location_is_used() {
        let f = ApiFixture::from_jsonl("weather", FIXTURE).unwrap();
        assert_eq!(f.locate("what is the weather in hong kong?").location, "Hong Kong");
        assert_eq!(
            f.query("weather in Hong Kong").linearize().unwrap(),
            "Weather is Sunny , High is 32 C , Low is 27 C"
        );
    }

    #[test]
    fn falls_back_to_default() {
        let f = ApiFixture::from_jsonl("weather", FIXTURE).unwrap();
        assert_eq!(f.default_location(), "Hong Kong");
        assert_eq!(f.locate("will it rain tomorrow?").location, "Hong Kong");
        // whole-word match only
        assert_eq!(f.locate("parisian food").location, "Hong Kong");
    }

    #[test]
    fn bad_records_rejected() {
        assert!(ApiFixture::from_jsonl("w", "").is_err());
        let dup = "{\"location\":\"A\",\"slots\":{}}\n{\"location\":\"a\",\"slots\":{}}";
        assert!(ApiFixture::from_jsonl("w", dup).is_err());
        assert!(matches!(
            ApiFixture::from_jsonl("w", "{\"location\":1}"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
