use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::TableRow;
use crate::error::{Error, Result};
use crate::knowledge::{ApiFixture, DocumentIndex, KnowledgeGraph};

/// Skill family; fixes which kind of knowledge its turns carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Style,
    Persona,
    Empathetic,
    TableGrounded,
    GraphGrounded,
    TextGrounded,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Style => "style",
            Family::Persona => "persona",
            Family::Empathetic => "empathetic",
            Family::TableGrounded => "table_grounded",
            Family::GraphGrounded => "graph_grounded",
            Family::TextGrounded => "text_grounded",
        }
    }

    /// The `MetaKnowledge` variant name carried by this family's turns.
    pub fn knowledge_kind(self) -> &'static str {
        match self {
            Family::Style | Family::Empathetic => "none",
            Family::Persona | Family::TextGrounded => "text",
            Family::TableGrounded => "table",
            Family::GraphGrounded => "graph",
        }
    }

    fn expected_source(self) -> KnowledgeSource {
        match self {
            Family::Style | Family::Empathetic => KnowledgeSource::None,
            Family::Persona => KnowledgeSource::Text,
            Family::TableGrounded => KnowledgeSource::Fixture,
            Family::GraphGrounded => KnowledgeSource::Graph,
            Family::TextGrounded => KnowledgeSource::Docs,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown skill family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    None,
    /// A paragraph rendered from `knowledge_text`.
    Text,
    Fixture,
    Graph,
    Docs,
}

impl KnowledgeSource {
    /// Placeholders this source provides to templates.
    fn provided(self) -> &'static [&'static str] {
        match self {
            KnowledgeSource::None | KnowledgeSource::Text => &[],
            KnowledgeSource::Fixture => &["location"],
            KnowledgeSource::Graph => &["entity", "head", "relation", "tail", "neighbor"],
            KnowledgeSource::Docs => &["title", "paragraph"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub user: String,
    pub system: String,
    #[serde(default)]
    pub entities: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeBlock {
    pub options: Vec<Exchange>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub name: String,
    pub family: Family,
    pub knowledge: KnowledgeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table: Vec<TableRow>,
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
    pub exchanges: Vec<ExchangeBlock>,
    /// Registered after the default skills.
    #[serde(default)]
    pub continual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_dialogues: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// `{name}` placeholders in order of appearance.
pub fn placeholders(template: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Spec(format!("unclosed placeholder in {template:?}")))?;
        let name = &after[..close];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Spec(format!("bad placeholder {{{name}}} in {template:?}")));
        }
        out.push(name.to_string());
        rest = &after[close + 1..];
    }
    Ok(out)
}

/// Substitutes every `{name}` from `values`; unknown names are spec errors.
pub fn render(template: &str, values: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Spec(format!("unclosed placeholder in {template:?}")))?;
        let name = &after[..close];
        let value = values
            .get(name)
            .ok_or_else(|| Error::Spec(format!("template references undefined slot {{{name}}}")))?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl SkillSpec {
    pub fn validate(&self) -> Result<()> {
        let ctx = |m: String| Error::Spec(format!("skill {:?}: {m}", self.name));
        if self.name.trim().is_empty() {
            return Err(Error::Spec("skill name is empty".into()));
        }
        if self.knowledge != self.family.expected_source() {
            return Err(ctx(format!(
                "family {} requires knowledge {:?}",
                self.family,
                self.family.expected_source()
            )));
        }
        if self.exchanges.is_empty() || self.exchanges.iter().any(|b| b.options.is_empty()) {
            return Err(ctx("needs at least one exchange block, each with options".into()));
        }
        if let Some((k, _)) = self.slots.iter().find(|(_, v)| v.is_empty()) {
            return Err(ctx(format!("slot {k} has no values")));
        }
        let mut known: BTreeSet<&str> = self.slots.keys().map(String::as_str).collect();
        known.extend(self.knowledge.provided());
        let check = |t: &str| -> Result<()> {
            for p in placeholders(t)? {
                if !known.contains(p.as_str()) {
                    return Err(ctx(format!("template references undefined slot {{{p}}}")));
                }
            }
            Ok(())
        };
        match (self.knowledge, &self.knowledge_text) {
            (KnowledgeSource::Text, Some(t)) => check(t)?,
            (KnowledgeSource::Text, None) => return Err(ctx("text knowledge needs knowledge_text".into())),
            (_, Some(_)) => return Err(ctx("knowledge_text is only used with text knowledge".into())),
            _ => {}
        }
        if (self.knowledge == KnowledgeSource::Fixture) == self.table.is_empty() {
            return Err(ctx("a table is required exactly when knowledge is fixture".into()));
        }
        for row in &self.table {
            check(&row.value)?;
        }
        for b in &self.exchanges {
            for ex in &b.options {
                check(&ex.user)?;
                check(&ex.system)?;
                for e in &ex.entities {
                    check(e)?;
                }
            }
        }
        Ok(())
    }

    /// Explicit seed, or one derived from the suite seed and the skill name
    /// (so a skill's data never depends on its position in the suite).
    pub fn resolved_seed(&self, suite_seed: u64) -> u64 {
        self.seed.unwrap_or_else(|| {
            let mut h = Sha256::new();
            h.update(suite_seed.to_le_bytes());
            h.update(self.name.as_bytes());
            let d = h.finalize();
            u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
        })
    }
}

/// Knowledge sources shared by the suite's skills.
#[derive(Clone, Debug, Default)]
pub struct Resources {
    pub fixture: Option<ApiFixture>,
    pub graph: Option<KnowledgeGraph>,
    pub docs: Option<DocumentIndex>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub name: String,
    pub seed: u64,
    pub n_dialogues: usize,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "default_unique_fraction")]
    pub min_unique_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub docs: Option<PathBuf>,
    #[serde(rename = "skill")]
    pub skills: Vec<SkillSpec>,
}

fn default_max_vocab() -> usize {
    250
}

fn default_unique_fraction() -> f64 {
    0.3
}

const REFERENCE_SUITE: &str = include_str!("../../data/reference_suite.toml");
const REFERENCE_FIXTURE: &str = include_str!("../../data/weather.jsonl");
const REFERENCE_GRAPH: &str = include_str!("../../data/graph.tsv");
const REFERENCE_DOCS: &str = include_str!("../../data/docs.jsonl");

/// File names the suite's knowledge sources are stored under in a corpus
/// directory, with the bundled reference contents.
pub const REFERENCE_FILES: [(&str, &str); 3] = [
    ("weather.jsonl", REFERENCE_FIXTURE),
    ("graph.tsv", REFERENCE_GRAPH),
    ("docs.jsonl", REFERENCE_DOCS),
];

impl SuiteSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SuiteSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dialogues == 0 {
            return Err(Error::Spec("n_dialogues must be >= 1".into()));
        }
        let mut names = BTreeSet::new();
        for s in &self.skills {
            if !names.insert(&s.name) {
                return Err(Error::Spec(format!("duplicate skill {:?}", s.name)));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// The checked-in reference suite with its bundled knowledge files.
    pub fn reference() -> (Self, Resources) {
        let spec = Self::from_toml(REFERENCE_SUITE).expect("reference suite parses");
        let res = Resources {
            fixture: Some(ApiFixture::from_jsonl("weather", REFERENCE_FIXTURE).expect("fixture parses")),
            graph: Some(KnowledgeGraph::from_tsv(REFERENCE_GRAPH).expect("graph parses")),
            docs: Some(DocumentIndex::from_jsonl(REFERENCE_DOCS).expect("docs parse")),
        };
        (spec, res)
    }

    /// Reads a suite file; knowledge paths resolve relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Resources)> {
        let path = path.as_ref();
        let spec = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let res = Resources {
            fixture: spec
                .fixture
                .as_ref()
                .map(|p| ApiFixture::load("weather", dir.join(p)))
                .transpose()?,
            graph: spec.graph.as_ref().map(|p| KnowledgeGraph::load(dir.join(p))).transpose()?,
            docs: spec.docs.as_ref().map(|p| DocumentIndex::load(dir.join(p))).transpose()?,
        };
        Ok((spec, res))
    }

    pub fn skill(&self, name: &str) -> Option<&SkillSpec> {
        self.skills.iter().find(|s| s.name == name)
    }

    /// Default skills first, then continual ones, each in file order.
    pub fn registration_order(&self) -> Vec<&SkillSpec> {
        let (a, b): (Vec<_>, Vec<_>) = self.skills.iter().partition(|s| !s.continual);
        a.into_iter().chain(b).collect()
    }

    pub fn default_skills(&self) -> Vec<&SkillSpec> {
        self.skills.iter().filter(|s| !s.continual).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_placeholders() {
        let mut v = BTreeMap::new();
        v.insert("a".to_string(), "x".to_string());
        assert_eq!(render("{a} and {a}", &v).unwrap(), "x and x");
        assert!(matches!(render("{b}", &v), Err(Error::Spec(_))));
        assert_eq!(placeholders("{a} {b_2}").unwrap(), ["a", "b_2"]);
        assert!(placeholders("{a").is_err());
    }

    #[test]
    fn reference_suite_is_valid() {
        let (spec, res) = SuiteSpec::reference();
        assert_eq!(spec.default_skills().len(), 6);
        assert_eq!(spec.skills.len(), 8);
        assert!(res.fixture.is_some() && res.graph.is_some() && res.docs.is_some());
        let families: BTreeSet<&str> = spec.default_skills().iter().map(|s| s.family.as_str()).collect();
        assert_eq!(families.len(), 6);
    }

    #[test]
    fn undefined_slot_is_spec_error() {
        let (mut spec, _) = SuiteSpec::reference();
        spec.skills[0].exchanges[0].options[0].system = "the {nope} was fine".into();
        assert!(matches!(spec.validate(), Err(Error::Spec(m)) if m.contains("nope")));
    }

    #[test]
    fn family_source_mismatch_rejected() {
        let (mut spec, _) = SuiteSpec::reference();
        spec.skills[0].knowledge = KnowledgeSource::Graph;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn seeds_depend_on_name_only() {
        let (spec, _) = SuiteSpec::reference();
        let s = &spec.skills[0];
        let mut renamed = s.clone();
        renamed.name = "other".into();
        assert_eq!(s.resolved_seed(1), s.resolved_seed(1));
        assert_ne!(s.resolved_seed(1), renamed.resolved_seed(1));
    }
}
