//! Dialogue manager: a small encoder that maps dialogue history to a skill id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{INIT_STD, LN_EPS};
use crate::checkpoint::Checkpoint;
use crate::dialogue::{DialogueHistory, MetaKnowledge, SkillId};
use crate::engine::serialize_input;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{TokenId, Tokenizer, SEP_USR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Only the last user utterance.
    SingleTurn,
    /// The serialized history (without knowledge).
    MultiTurn,
}

impl std::str::FromStr for HistoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_turn" | "single" => Ok(Self::SingleTurn),
            "multi_turn" | "multi" => Ok(Self::MultiTurn),
            _ => Err(Error::Config(format!("unknown history mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingExample {
    pub history: DialogueHistory,
    pub label: SkillId,
    pub mode: HistoryMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub vocab_size: usize,
    pub dim: usize,
    /// Longest input; longer inputs keep their most recent tokens.
    pub max_len: usize,
}

impl ManagerConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: 32,
            max_len: 64,
        }
    }
}

const TENSORS: [&str; 10] = [
    "emb", "pos", "ln.gamma", "ln.beta", "wq", "wk", "wv", "wo", "head.w", "head.b",
];

/// Token + position embeddings, one non-causal self-attention block with a
/// residual connection, mean pooling and a linear head over `p` classes.
/// Class `i` is the `i`-th smallest registered skill id.
#[derive(Clone, Debug, PartialEq)]
pub struct Manager {
    config: ManagerConfig,
    labels: Vec<SkillId>,
    tensors: Vec<Tensor>,
    trained: bool,
}

impl Manager {
    pub fn init(config: ManagerConfig, mut labels: Vec<SkillId>, seed: u64) -> Result<Self> {
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::Degenerate(format!(
                "the manager needs at least 2 skills, got {}",
                labels.len()
            )));
        }
        if config.dim == 0 || config.max_len == 0 || config.vocab_size == 0 {
            return Err(Error::Config("manager dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, p) = (config.vocab_size, config.dim, labels.len());
        let tensors = vec![
            Tensor::randn(&[v, d], INIT_STD, &mut rng),
            Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng),
            Tensor::ones(&[d]),
            Tensor::zeros(&[d]),
            Tensor::randn(&[d, d], INIT_STD, &mut rng),
            Tensor::randn(&[d, d], INIT_STD, &mut rng),
            Tensor::randn(&[d, d], INIT_STD, &mut rng),
            Tensor::randn(&[d, d], INIT_STD, &mut rng),
            Tensor::randn(&[d, p], INIT_STD, &mut rng),
            Tensor::zeros(&[p]),
        ];
        Ok(Self {
            config,
            labels,
            tensors,
            trained: false,
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn labels(&self) -> &[SkillId] {
        &self.labels
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn class_of(&self, skill: SkillId) -> Result<usize> {
        self.labels.binary_search(&skill).map_err(|_| Error::Routing(skill.0))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    /// Token ids the encoder sees for `history` in `mode`.
    pub fn encode(&self, tok: &Tokenizer, history: &DialogueHistory, mode: HistoryMode) -> Result<Vec<TokenId>> {
        let mut ids = match mode {
            HistoryMode::SingleTurn => {
                let u = history
                    .last_user()
                    .ok_or_else(|| Error::Contract("history has no user turn".into()))?;
                let mut ids = vec![SEP_USR];
                ids.extend(tok.encode(&u.text));
                ids
            }
            HistoryMode::MultiTurn => serialize_input(tok, history, &MetaKnowledge::None, usize::MAX)?,
        };
        if ids.len() > self.config.max_len {
            ids.drain(..ids.len() - self.config.max_len);
        }
        Ok(ids)
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect()
    }

    /// `1 × p` logits.
    pub fn logits_graph(&self, g: &mut Graph<'_>, vars: &[Var], ids: &[TokenId]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Contract("manager input is empty".into()));
        }
        let positions: Vec<TokenId> = (0..ids.len() as TokenId).collect();
        let tok = g.embedding(vars[0], ids)?;
        let pos = g.embedding(vars[1], &positions)?;
        let x = g.add(tok, pos)?;
        let a = g.layer_norm(x, vars[2], vars[3], LN_EPS)?;
        let q = g.matmul(a, vars[4])?;
        let k = g.matmul(a, vars[5])?;
        let v = g.matmul(a, vars[6])?;
        let s = g.matmul_t(q, k)?;
        let s = g.scale(s, 1.0 / (self.config.dim as f32).sqrt())?;
        let p = g.softmax_rows(s)?;
        let att = g.matmul(p, v)?;
        let att = g.matmul(att, vars[7])?;
        let x = g.add(x, att)?;
        let pooled = g.mean_rows(x)?;
        let out = g.matmul(pooled, vars[8])?;
        g.add_bias(out, vars[9])
    }

    /// Class probabilities for already-encoded input.
    pub fn probabilities(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let logits = self.logits_graph(&mut g, &vars, ids)?;
        Ok(softmax(g.value(logits).data()))
    }

    /// Most probable skill (ties toward the lowest id) and the probability
    /// of every registered skill, in id order.
    pub fn predict(
        &self,
        tok: &Tokenizer,
        history: &DialogueHistory,
        mode: HistoryMode,
    ) -> Result<(SkillId, Vec<(SkillId, f64)>)> {
        if !self.trained {
            return Err(Error::State("dialogue manager is not trained".into()));
        }
        let probs = self.probabilities(&self.encode(tok, history, mode)?)?;
        let best = argmax_f64(&probs);
        Ok((
            self.labels[best],
            self.labels.iter().copied().zip(probs).collect(),
        ))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("manager");
        c.set_meta("vocab_size", self.config.vocab_size);
        c.set_meta("dim", self.config.dim);
        c.set_meta("max_len", self.config.max_len);
        let labels: Vec<String> = self.labels.iter().map(|l| l.0.to_string()).collect();
        c.set_meta("labels", labels.join(","));
        c.set_meta("trained", self.trained);
        for (name, t) in TENSORS.iter().zip(&self.tensors) {
            c.push(*name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("manager")?;
        let config = ManagerConfig {
            vocab_size: c.meta_parse("vocab_size")?,
            dim: c.meta_parse("dim")?,
            max_len: c.meta_parse("max_len")?,
        };
        let labels = c
            .meta("labels")?
            .split(',')
            .map(|s| s.parse().map(SkillId))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config("manager label map is malformed".into()))?;
        let mut m = Self::init(config, labels, 0)?;
        for (name, slot) in TENSORS.iter().zip(m.tensors.iter_mut()) {
            let t = c.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!("manager tensor {name} has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
        m.trained = c.meta_parse("trained")?;
        Ok(m)
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// First index of the maximum.
pub fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
