use std::path::{Path, PathBuf};

use adapterbot::corpus::Split;
use adapterbot::pipeline::PipelineConfig;
use adapterbot_service::ServiceConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Everything a run can be configured with. Built-in defaults, then the
/// `--config` file, then command-line flags (or their `ADAPTERBOT_*`
/// environment variables).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Defaults to the suite seed for corpus commands and to
    /// `service.decode.seed` for chat and serve.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub pipeline: PipelineConfig,
    pub eval: EvalSection,
    /// Also holds the artifact directory and decode defaults used by every
    /// command.
    pub service: ServiceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub dir: PathBuf,
    /// Suite spec for `synth-corpus`; the bundled reference suite if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("corpus"),
            suite: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: String,
    pub split: Split,
    pub routed: bool,
    pub max_examples: usize,
    /// Report file; `<artifacts>/eval.jsonl` if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: "bleu,ppl,f1,entity_f1,dist".into(),
            split: Split::Test,
            routed: false,
            max_examples: 0,
            out: None,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    pub fn artifacts(&self) -> &Path {
        &self.service.artifacts
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
