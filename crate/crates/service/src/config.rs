use std::path::{Path, PathBuf};

use adapterbot::backbone::DecodeParams;
use adapterbot::corpus::{Resources, SuiteSpec};
use adapterbot::knowledge::{ApiFixture, DocumentIndex, KnowledgeGraph};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Artifact directory written by the training commands.
    pub artifacts: PathBuf,
    /// Knowledge sources; the bundled reference files are used for any
    /// that are unset.
    pub fixture: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub docs: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    /// Persona paragraph for persona-family skills.
    pub persona: Option<String>,
    pub decode: DecodeParams,
    /// Candidates sampled per turn when a style is requested.
    pub rerank_candidates: usize,
    pub max_turns: usize,
    pub max_text_chars: usize,
    /// Shown in place of a reply the filter blocks.
    pub fallback_text: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            artifacts: PathBuf::from("artifacts"),
            fixture: None,
            graph: None,
            docs: None,
            blocklist: None,
            persona: Some("i am a teacher . i enjoy hiking . i have a dog .".into()),
            decode: DecodeParams::default(),
            rerank_candidates: 4,
            max_turns: 40,
            max_text_chars: 512,
            fallback_text: "sorry , i would rather not say that .".into(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.decode.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        if self.max_turns < 2 {
            return Err(ServiceError::Config("max_turns must be >= 2".into()));
        }
        if self.rerank_candidates == 0 {
            return Err(ServiceError::Config("rerank_candidates must be >= 1".into()));
        }
        if self.max_text_chars == 0 {
            return Err(ServiceError::Config("max_text_chars must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resources(&self) -> Result<Resources, ServiceError> {
        let (_, reference) = SuiteSpec::reference();
        let load_err = |p: &Path, e: adapterbot::Error| ServiceError::Config(format!("{}: {e}", p.display()));
        Ok(Resources {
            fixture: match &self.fixture {
                Some(p) => Some(ApiFixture::load("weather", p).map_err(|e| load_err(p, e))?),
                None => reference.fixture,
            },
            graph: match &self.graph {
                Some(p) => Some(KnowledgeGraph::load(p).map_err(|e| load_err(p, e))?),
                None => reference.graph,
            },
            docs: match &self.docs {
                Some(p) => Some(DocumentIndex::load(p).map_err(|e| load_err(p, e))?),
                None => reference.docs,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ServiceConfig::from_toml("listen = \"0.0.0.0:9000\"\n[decode]\nmax_new_tokens = 8\n").unwrap();
        assert_eq!(c.listen, "0.0.0.0:9000");
        assert_eq!(c.decode.max_new_tokens, 8);
        assert_eq!(c.max_turns, 40);
        assert!(ServiceConfig::from_toml("nonsense = 1").is_err());
    }

    #[test]
    fn bundled_resources_by_default() {
        let r = ServiceConfig::default().resources().unwrap();
        assert!(r.fixture.is_some() && r.graph.is_some() && r.docs.is_some());
    }
}
