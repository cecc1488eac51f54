//! End-to-end wiring shared by the command line, the server and the
//! acceptance suite: tokenizer construction, pretraining, per-skill plans,
//! routing sets, evaluation and the on-disk artifact layout.
//!
//! Artifact directory:
//!
//! ```text
//! tokenizer.json        vocabulary, specials first
//! backbone.ckpt
//! adapters/NNN-name.ckpt   one per skill, NNN = skill id
//! manager.ckpt          optional
//! styles/ID.ckpt        optional, one per style id
//! logs/*.jsonl
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterStack;
use crate::backbone::{Backbone, DecodeParams, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::corpus::{self, Family, Resources, SkillDataset, Split, Suite, SuiteSpec, REFERENCE_FILES};
use crate::dialogue::{MetaKnowledge, SkillId};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::manager::{HistoryMode, Manager, ManagerConfig, RoutingExample};
use crate::metrics::{self, metric_tokens, AdapterRef, EvalReport, ExampleScore, Metric, SkillReport};
use crate::reranker::{StyleClassifier, StyleReport, StyleTrainConfig};
use crate::tokenizer::Tokenizer;
use crate::trainer::{self, SkillPlan, TrainConfig, TrainLog};

/// Number of test-split probes per skill used by the isolation audit.
pub const PROBES_PER_SKILL: usize = 4;

/// Suite texts plus every knowledge string retrieval can produce, so
/// serve-time knowledge never maps to `<unk>`.
pub fn build_tokenizer(suite: &Suite) -> Tokenizer {
    let mut texts = suite.texts();
    texts.extend(resource_texts(&suite.resources));
    Tokenizer::from_texts(texts.iter().map(String::as_str))
}

fn resource_texts(res: &Resources) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(fx) = &res.fixture {
        for row in fx.rows() {
            out.push(row.location.clone());
            out.extend(fx.query(&row.location).linearize());
        }
    }
    if let Some(g) = &res.graph {
        out.extend(MetaKnowledge::Graph {
            triples: g.triples().to_vec(),
        }
        .linearize());
    }
    if let Some(d) = &res.docs {
        for doc in d.docs() {
            out.push(doc.title.clone());
            out.push(doc.first_paragraph.clone());
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub lr: Option<f32>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub bottleneck: usize,
    pub pretrain: TrainConfig,
    pub adapter: TrainConfig,
    /// Per-family schedule changes on top of `adapter`, keyed by family name.
    pub adapter_families: BTreeMap<String, Schedule>,
    pub manager: TrainConfig,
    pub manager_dim: usize,
    pub manager_max_len: usize,
    pub style: StyleTrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let toy = ModelConfig::toy(0);
        let small = ManagerConfig::small(0);
        Self {
            n_layers: toy.n_layers,
            hidden_dim: toy.hidden_dim,
            n_heads: toy.n_heads,
            max_seq_len: toy.max_seq_len,
            bottleneck: toy.bottleneck,
            pretrain: TrainConfig {
                lr: 3e-3,
                max_epochs: 8,
                ..TrainConfig::default()
            },
            adapter: TrainConfig {
                lr: 3e-3,
                ..TrainConfig::default()
            },
            // Copying slot values out of the table is learned slowly by a
            // frozen 2-layer backbone; it keeps improving long after the
            // other families have converged, across long validation
            // plateaus, so it runs the full schedule.
            adapter_families: BTreeMap::from([(
                Family::TableGrounded.as_str().to_string(),
                Schedule {
                    lr: Some(6e-3),
                    max_epochs: Some(200),
                    patience: Some(200),
                },
            )]),
            manager: TrainConfig {
                lr: 2e-3,
                ..TrainConfig::default()
            },
            manager_dim: small.dim,
            manager_max_len: small.max_len,
            style: StyleTrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            bottleneck: self.bottleneck,
        }
    }

    /// Adapter training settings for one skill.
    pub fn adapter_config(&self, family: Family, seed: u64) -> TrainConfig {
        let mut c = TrainConfig {
            seed,
            ..self.adapter.clone()
        };
        if let Some(o) = self.adapter_families.get(family.as_str()) {
            c.lr = o.lr.unwrap_or(c.lr);
            c.max_epochs = o.max_epochs.unwrap_or(c.max_epochs);
            c.patience = o.patience.unwrap_or(c.patience);
        }
        c
    }

    pub fn manager_config(&self, vocab_size: usize) -> ManagerConfig {
        ManagerConfig {
            vocab_size,
            dim: self.manager_dim,
            max_len: self.manager_max_len,
        }
    }
}

/// Builds a fresh backbone over the suite's pooled dialogues (no knowledge)
/// and pretrains it; the result is frozen.
pub fn pretrain(suite: &Suite, cfg: &PipelineConfig, seed: u64) -> Result<(Tokenizer, Backbone, TrainLog)> {
    let tok = build_tokenizer(suite);
    let model = cfg.model(tok.len());
    let rows = |split: Split| -> Result<Vec<_>> {
        suite
            .datasets
            .iter()
            .flat_map(|ds| trainer::dialogues(ds, split))
            .map(|d| trainer::dialogue_row(&tok, model.max_seq_len, &d))
            .collect()
    };
    let (train, valid) = (rows(Split::Train)?, rows(Split::Valid)?);
    let mut backbone = Backbone::build(model, seed)?;
    let tc = TrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    let log = trainer::pretrain_backbone(&mut backbone, &train, &valid, &tc)?;
    Ok((tok, backbone, log))
}

/// Training plans for the named skills (all of them, in registration order,
/// when `names` is empty). Each skill's seed comes from `seed` and its name
/// unless the spec pins one.
pub fn skill_plans(
    suite: &Suite,
    tok: &Tokenizer,
    max_seq_len: usize,
    names: &[String],
    seed: u64,
) -> Result<Vec<SkillPlan>> {
    let order: Vec<&str> = if names.is_empty() {
        suite.spec.registration_order().iter().map(|s| s.name.as_str()).collect()
    } else {
        names.iter().map(String::as_str).collect()
    };
    order
        .into_iter()
        .map(|name| {
            let spec = suite
                .spec
                .skill(name)
                .ok_or_else(|| Error::Config(format!("unknown skill {name:?}")))?;
            let ds = dataset(suite, name)?;
            SkillPlan::from_dataset(
                tok,
                max_seq_len,
                ds,
                spec.family,
                &suite.spec.name,
                spec.resolved_seed(seed),
                PROBES_PER_SKILL,
            )
        })
        .collect()
}

pub fn dataset<'s>(suite: &'s Suite, name: &str) -> Result<&'s SkillDataset> {
    suite
        .dataset(name)
        .ok_or_else(|| Error::Config(format!("suite has no skill {name:?}")))
}

/// `(skill id, dataset)` for every registered skill the suite knows about.
pub fn registered_datasets<'s>(engine: &Engine, suite: &'s Suite) -> Vec<(SkillId, &'s SkillDataset)> {
    engine
        .adapters()
        .iter()
        .filter_map(|(id, s)| suite.dataset(&s.meta.name).map(|d| (id, d)))
        .collect()
}

pub fn train_manager(
    engine: &Engine,
    suite: &Suite,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Manager, TrainLog)> {
    let data = registered_datasets(engine, suite);
    let modes = [HistoryMode::SingleTurn, HistoryMode::MultiTurn];
    let train = trainer::routing_examples(&data, Split::Train, &modes);
    let valid = trainer::routing_examples(&data, Split::Valid, &modes);
    let tc = TrainConfig {
        seed,
        ..cfg.manager.clone()
    };
    trainer::train_manager(&engine.tokenizer, &train, &valid, cfg.manager_config(engine.tokenizer.len()), &tc)
}

/// Held-out routing examples for one history mode.
pub fn routing_test_set(engine: &Engine, suite: &Suite, mode: HistoryMode) -> Vec<RoutingExample> {
    trainer::routing_examples(&registered_datasets(engine, suite), Split::Test, &[mode])
}

pub fn train_styles(engine: &Engine, suite: &Suite, cfg: &StyleTrainConfig) -> Result<Vec<(StyleClassifier, StyleReport)>> {
    let skills: Vec<(SkillId, Family, &SkillDataset)> = registered_datasets(engine, suite)
        .into_iter()
        .filter_map(|(id, d)| engine.family(id).ok().flatten().map(|f| (id, f, d)))
        .collect();
    trainer::train_styles(&skills, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub split: Split,
    /// Route with the manager instead of using each skill's own adapter.
    pub routed: bool,
    pub decode: DecodeParams,
    /// Cap on evaluated turns per skill (0 = all).
    pub max_examples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            split: Split::Test,
            routed: false,
            decode: DecodeParams::greedy(),
            max_examples: 0,
        }
    }
}

/// Scores every registered skill on its split of the suite.
pub fn evaluate(engine: &Engine, suite: &Suite, opts: &EvalOptions) -> Result<EvalReport> {
    let tok = &engine.tokenizer;
    let n_max = engine.backbone().config().max_seq_len;
    let mut skills = Vec::new();
    for (id, ds) in registered_datasets(engine, suite) {
        let mut examples = ds.split(opts.split);
        if opts.max_examples > 0 {
            examples.truncate(opts.max_examples);
        }
        if examples.is_empty() {
            return Err(Error::Config(format!("skill {:?} has no {:?} examples", ds.skill, opts.split)));
        }
        let mut responses = Vec::with_capacity(examples.len());
        let mut routed_hits = 0usize;
        for e in &examples {
            let t = if opts.routed {
                let (t, _) = engine.predict_skill(&e.history, HistoryMode::MultiTurn)?;
                routed_hits += usize::from(t == id);
                t
            } else {
                id
            };
            let r = engine.respond(&e.history, &e.meta, t, &opts.decode)?;
            responses.push(metric_tokens(&r.utterance.text));
        }
        let golds: Vec<Vec<String>> = examples.iter().map(|e| metric_tokens(&e.gold_response)).collect();
        let ents: Vec<Vec<Vec<String>>> = examples
            .iter()
            .map(|e| e.gold_entities.iter().map(|s| metric_tokens(s)).collect())
            .collect();
        let pairs: Vec<(&[String], &[String])> = responses.iter().zip(&golds).map(|(c, r)| (&c[..], &r[..])).collect();
        let mut m = BTreeMap::new();
        for metric in &opts.metrics {
            match metric {
                Metric::Bleu => {
                    for n in 1..=3 {
                        m.insert(format!("bleu{n}"), metrics::corpus_bleu(&pairs, n));
                    }
                    m.insert("avg_bleu".into(), metrics::corpus_avg_bleu(&pairs));
                }
                Metric::Ppl => {
                    let rows = examples
                        .iter()
                        .map(|e| crate::engine::training_row(tok, n_max, &e.history, &e.meta, &e.gold_response))
                        .collect::<Result<Vec<_>>>()?;
                    let stack = engine.adapters().get(id)?;
                    m.insert("ppl".into(), engine.backbone().perplexity(Some(stack), &rows)?);
                }
                Metric::F1 => {
                    let f: f64 = pairs.iter().map(|(c, r)| metrics::unigram_f1(c, r)).sum();
                    m.insert("f1".into(), f / pairs.len() as f64);
                }
                Metric::EntityF1 => {
                    let cases: Vec<(&[String], &[Vec<String>])> =
                        responses.iter().zip(&ents).map(|(c, g)| (&c[..], &g[..])).collect();
                    m.insert("entity_f1".into(), metrics::entity_f1(&cases));
                }
                Metric::Dist => {
                    let texts: Vec<&[String]> = responses.iter().map(Vec::as_slice).collect();
                    for n in 1..=3 {
                        m.insert(format!("dist{n}"), metrics::distinct_n(&texts, n));
                    }
                }
            }
        }
        if opts.routed {
            m.insert("routing_acc".into(), routed_hits as f64 / examples.len() as f64);
        }
        let scores = examples
            .iter()
            .zip(&responses)
            .zip(&golds)
            .map(|((e, c), r)| ExampleScore {
                dialogue_id: e.dialogue_id.clone(),
                turn_index: e.turn_index,
                response: c.join(" "),
                gold: e.gold_response.clone(),
                scores: BTreeMap::from([
                    ("avg_bleu".to_string(), metrics::avg_bleu(c, r)),
                    ("f1".to_string(), metrics::unigram_f1(c, r)),
                ]),
            })
            .collect();
        skills.push(SkillReport {
            skill: ds.skill.clone(),
            skill_id: id.0,
            metrics: m,
            examples: scores,
        });
    }
    let mut config = BTreeMap::new();
    config.insert("split".into(), format!("{:?}", opts.split).to_lowercase());
    config.insert("routed".into(), opts.routed.to_string());
    config.insert(
        "metrics".into(),
        opts.metrics.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
    );
    config.insert("decode".into(), serde_json::to_string(&opts.decode).expect("serializes"));
    Ok(EvalReport {
        corpus_id: suite.spec.name.clone(),
        backbone_hash: engine.backbone().content_hash(),
        adapters: engine
            .adapters()
            .iter()
            .map(|(id, s)| AdapterRef {
                skill_id: id.0,
                name: s.meta.name.clone(),
                content_hash: s.content_hash(),
            })
            .collect(),
        config,
        skills,
    })
}

/// Paths inside an artifact directory.
#[derive(Clone, Debug)]
pub struct ArtifactDir(pub PathBuf);

impl ArtifactDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self(path.into())
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.0.join("tokenizer.json")
    }

    pub fn backbone(&self) -> PathBuf {
        self.0.join("backbone.ckpt")
    }

    pub fn adapters(&self) -> PathBuf {
        self.0.join("adapters")
    }

    pub fn adapter(&self, id: SkillId, name: &str) -> PathBuf {
        self.adapters().join(format!("{:03}-{name}.ckpt", id.0))
    }

    pub fn manager(&self) -> PathBuf {
        self.0.join("manager.ckpt")
    }

    pub fn styles(&self) -> PathBuf {
        self.0.join("styles")
    }

    pub fn style(&self, id: u32) -> PathBuf {
        self.styles().join(format!("{id}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.0.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn save_log(&self, name: &str, log: &TrainLog) -> Result<PathBuf> {
        let p = self.log(name);
        std::fs::create_dir_all(p.parent().expect("has parent"))?;
        log.save(&p)?;
        Ok(p)
    }

    pub fn save_base(&self, tok: &Tokenizer, backbone: &Backbone) -> Result<()> {
        std::fs::create_dir_all(&self.0)?;
        std::fs::write(self.tokenizer(), serde_json::to_string_pretty(tok.vocab()).expect("serializes"))?;
        backbone.to_checkpoint().save(self.backbone())
    }

    pub fn save_adapter(&self, id: SkillId, stack: &AdapterStack) -> Result<PathBuf> {
        std::fs::create_dir_all(self.adapters())?;
        let p = self.adapter(id, &stack.meta.name);
        stack.to_checkpoint().save(&p)?;
        Ok(p)
    }

    pub fn save_manager(&self, m: &Manager) -> Result<()> {
        m.to_checkpoint().save(self.manager())
    }

    pub fn save_style(&self, s: &StyleClassifier) -> Result<()> {
        std::fs::create_dir_all(self.styles())?;
        s.to_checkpoint().save(self.style(s.style_id))
    }

    /// Writes every component of `engine`.
    pub fn save_engine(&self, engine: &Engine) -> Result<()> {
        self.save_base(&engine.tokenizer, engine.backbone())?;
        for (id, s) in engine.adapters().iter() {
            self.save_adapter(id, s)?;
        }
        if let Some(m) = engine.manager() {
            self.save_manager(m)?;
        }
        for id in engine.style_ids() {
            self.save_style(engine.style(id).expect("listed"))?;
        }
        Ok(())
    }

    /// Tokenizer and backbone only.
    pub fn load_base(&self) -> Result<Engine> {
        let vocab: Vec<String> = serde_json::from_str(&std::fs::read_to_string(self.tokenizer())?)
            .map_err(|e| Error::Config(format!("{}: {e}", self.tokenizer().display())))?;
        let backbone = Backbone::from_checkpoint(&Checkpoint::load(self.backbone())?)?;
        Engine::new(Tokenizer::from_vocab(vocab)?, backbone)
    }

    /// Adapter files sorted by skill id; ids must be 1..=n without gaps.
    pub fn adapter_files(&self) -> Result<Vec<(SkillId, PathBuf)>> {
        let mut out = Vec::new();
        let dir = self.adapters();
        if !dir.exists() {
            return Ok(out);
        }
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "ckpt") {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let id: u32 = stem
                    .split('-')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad adapter file name {}", p.display())))?;
                out.push((SkillId(id), p));
            }
        }
        out.sort();
        for (i, (id, p)) in out.iter().enumerate() {
            if id.0 as usize != i + 1 {
                return Err(Error::Config(format!("adapter ids must be contiguous from 1: {}", p.display())));
            }
        }
        Ok(out)
    }

    /// Everything present in the directory.
    pub fn load_engine(&self) -> Result<Engine> {
        let mut engine = self.load_base()?;
        for (id, p) in self.adapter_files()? {
            let got = engine.register(AdapterStack::from_checkpoint(&Checkpoint::load(&p)?)?)?;
            debug_assert_eq!(got, id);
        }
        if self.manager().exists() {
            engine.set_manager(Manager::from_checkpoint(&Checkpoint::load(self.manager())?)?)?;
        }
        if self.styles().exists() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(self.styles())?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            for p in files {
                engine.set_style(StyleClassifier::from_checkpoint(&Checkpoint::load(&p)?)?);
            }
        }
        Ok(engine)
    }
}

/// A generated corpus on disk: the suite spec, its knowledge files and the
/// line-delimited examples.
///
/// ```text
/// suite.toml      spec, knowledge paths rewritten to the files below
/// corpus.jsonl
/// weather.jsonl, graph.tsv, docs.jsonl
/// ```
#[derive(Clone, Debug)]
pub struct CorpusDir(pub PathBuf);

impl CorpusDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self(path.into())
    }

    pub fn spec(&self) -> PathBuf {
        self.0.join("suite.toml")
    }

    pub fn corpus(&self) -> PathBuf {
        self.0.join("corpus.jsonl")
    }

    /// Writes `suite`. `source` is the directory the spec's own knowledge
    /// paths are relative to; without one the bundled files are written.
    pub fn save(&self, suite: &Suite, source: Option<&Path>) -> Result<()> {
        std::fs::create_dir_all(&self.0)?;
        let mut spec = suite.spec.clone();
        let slots = [&mut spec.fixture, &mut spec.graph, &mut spec.docs];
        for (slot, (name, bundled)) in slots.into_iter().zip(REFERENCE_FILES) {
            let dst = self.0.join(name);
            match (source, slot.as_ref()) {
                (Some(dir), Some(p)) => {
                    std::fs::copy(dir.join(p), &dst)?;
                }
                (Some(_), None) => continue,
                (None, _) => std::fs::write(&dst, bundled)?,
            }
            *slot = Some(PathBuf::from(name));
        }
        let text = toml::to_string(&spec).map_err(|e| Error::Spec(e.to_string()))?;
        std::fs::write(self.spec(), text)?;
        corpus::save_corpus(&suite.datasets, self.corpus())
    }

    pub fn load(&self) -> Result<Suite> {
        let (spec, resources) = SuiteSpec::load(self.spec())?;
        let datasets = corpus::load_corpus(self.corpus())?;
        for d in &datasets {
            if spec.skill(&d.skill).is_none() {
                return Err(Error::Spec(format!("corpus skill {:?} is not in the suite spec", d.skill)));
            }
        }
        Ok(Suite {
            spec,
            resources,
            datasets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_suite;

    #[test]
    fn corpus_dir_round_trip() {
        let (spec, res) = SuiteSpec::reference();
        let suite = synth_suite(&spec, &res).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = CorpusDir::new(tmp.path());
        dir.save(&suite, None).unwrap();
        let back = dir.load().unwrap();
        assert_eq!(back.datasets, suite.datasets);
        assert_eq!(back.spec.skills, suite.spec.skills);
        assert_eq!(back.spec.fixture, Some(PathBuf::from("weather.jsonl")));
        assert_eq!(build_tokenizer(&back).vocab(), build_tokenizer(&suite).vocab());

        let again = CorpusDir::new(tmp.path().join("copy"));
        again.save(&back, Some(tmp.path())).unwrap();
        assert_eq!(again.load().unwrap().datasets, suite.datasets);
    }

    #[test]
    fn family_schedules_override_the_base() {
        let cfg = PipelineConfig::default();
        let table = cfg.adapter_config(Family::TableGrounded, 7);
        let chat = cfg.adapter_config(Family::Empathetic, 7);
        assert_eq!(table.seed, 7);
        assert_eq!(chat.max_epochs, cfg.adapter.max_epochs);
        assert!(table.max_epochs > chat.max_epochs);
        assert!(table.lr > chat.lr);
        assert_eq!(chat.lr, cfg.adapter.lr);
    }
}
