//! Training loops: backbone pretraining, adapter training over the frozen
//! backbone, manager and style-classifier training.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterStack;
use crate::backbone::{Backbone, DecodeParams, LmExample};
use crate::corpus::{Family, SkillDataset, Split};
use crate::dialogue::{DialogueHistory, MetaKnowledge, SkillId, Utterance};
use crate::engine::{serialize_input, training_row, Engine};
use crate::error::{Error, Result};
use crate::manager::{HistoryMode, Manager, ManagerConfig, RoutingExample};
use crate::reranker::{train_style_classifier, StyleClassifier, StyleReport, StyleTrainConfig};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};
use crate::tokenizer::{TokenId, Tokenizer, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Validate every this many optimizer steps; 0 = once per epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-token (or per-example) loss over the batch.
    pub loss: f64,
    pub backbone_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub task: String,
    /// What `evals` measure; lower is better.
    pub metric: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub initial: f64,
    pub best: f64,
    pub best_step: usize,
    pub stop_step: usize,
    pub max_steps: usize,
    pub epochs: usize,
    pub stopped_early: bool,
    pub wall_clock_s: f64,
    pub notes: BTreeMap<String, String>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum LogLine<'a> {
    Header {
        task: &'a str,
        metric: &'a str,
        initial: f64,
    },
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
    Summary {
        best: f64,
        best_step: usize,
        stop_step: usize,
        max_steps: usize,
        epochs: usize,
        stopped_early: bool,
        wall_clock_s: f64,
        notes: &'a BTreeMap<String, String>,
    },
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![LogLine::Header {
            task: &self.task,
            metric: &self.metric,
            initial: self.initial,
        }];
        lines.extend(self.steps.iter().map(LogLine::Step));
        lines.extend(self.evals.iter().map(LogLine::Eval));
        lines.push(LogLine::Summary {
            best: self.best,
            best_step: self.best_step,
            stop_step: self.stop_step,
            max_steps: self.max_steps,
            epochs: self.epochs,
            stopped_early: self.stopped_early,
            wall_clock_s: self.wall_clock_s,
            notes: &self.notes,
        });
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Loss and parameter gradients of one example. `loss` is a sum over
/// `weight` units (tokens or examples); the batch gradient is normalized by
/// the total weight.
struct ExampleGrad {
    loss: f64,
    weight: f64,
    grads: Vec<Vec<f32>>,
    backbone_grad_norm: f64,
}

trait Trainable: Clone {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Result<Vec<&mut Tensor>>;
}

impl Trainable for AdapterStack {
    fn params(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }
    fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        self.tensors_mut()
    }
}

impl Trainable for Backbone {
    fn params(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }
    fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        self.tensors_mut()
    }
}

impl Trainable for Manager {
    fn params(&self) -> Vec<&Tensor> {
        self.tensors().iter().collect()
    }
    fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        Ok(self.tensors_mut())
    }
}

/// Shuffled minibatch Adam with early stopping on `evaluate` (lower is
/// better). Gradients are accumulated example by example in batch order.
/// On return `model` holds the best-evaluated parameters.
fn fit<M: Trainable>(
    task: &str,
    metric: &str,
    cfg: &TrainConfig,
    model: &mut M,
    n_train: usize,
    mut grad_of: impl FnMut(&M, usize) -> Result<ExampleGrad>,
    mut evaluate: impl FnMut(&M) -> Result<f64>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Contract(format!("{task}: no training examples")));
    }
    let start = Instant::now();
    let initial = evaluate(model)?;
    let mut log = TrainLog {
        task: task.to_string(),
        metric: metric.to_string(),
        initial,
        best: initial,
        max_steps: cfg.max_epochs * n_train.div_ceil(cfg.batch_size),
        ..Default::default()
    };
    log.evals.push(EvalRecord {
        step: 0,
        epoch: 0,
        value: initial,
    });
    let mut best = model.clone();
    let mut bad = 0usize;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut step = 0usize;

    // Returns true when training should stop.
    let mut check = |model: &M, step: usize, epoch: usize, log: &mut TrainLog, best: &mut M| -> Result<bool> {
        let value = evaluate(model)?;
        log.evals.push(EvalRecord { step, epoch, value });
        if value < log.best {
            log.best = value;
            log.best_step = step;
            *best = model.clone();
            bad = 0;
        } else {
            bad += 1;
        }
        Ok(bad >= cfg.patience)
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        log.epochs = epoch;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f32>> = model.params().iter().map(|t| vec![0.0; t.numel()]).collect();
            let (mut loss, mut weight, mut bb_norm) = (0.0f64, 0.0f64, 0.0f64);
            for &i in batch {
                let eg = grad_of(model, i)?;
                for (a, g) in acc.iter_mut().zip(&eg.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                loss += eg.loss;
                weight += eg.weight;
                bb_norm += eg.backbone_grad_norm;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let scale = 1.0 / weight.max(1.0) as f32;
            for a in &mut acc {
                a.iter_mut().for_each(|x| *x *= scale);
            }
            let grads: Vec<&[f32]> = acc.iter().map(Vec::as_slice).collect();
            adam.step(&mut model.params_mut()?, &grads)?;
            step += 1;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: loss / weight.max(1.0),
                backbone_grad_norm: bb_norm,
            });
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && check(model, step, epoch, &mut log, &mut best)? {
                log.stopped_early = true;
                break 'epochs;
            }
        }
        if cfg.eval_every == 0 && check(model, step, epoch, &mut log, &mut best)? {
            log.stopped_early = true;
            break;
        }
    }
    log.stop_step = step;
    log.wall_clock_s = start.elapsed().as_secs_f64();
    *model = best;
    Ok(log)
}

fn sq_norm(g: &[f32]) -> f64 {
    g.iter().map(|&v| v as f64 * v as f64).sum()
}

/// Turns of a dataset split into training rows.
pub fn lm_examples(tok: &Tokenizer, max_seq_len: usize, ds: &SkillDataset, split: Split) -> Result<Vec<LmExample>> {
    ds.split(split)
        .into_iter()
        .map(|e| training_row(tok, max_seq_len, &e.history, &e.meta, &e.gold_response))
        .collect()
}

/// One whole dialogue without knowledge, for plain LM training: loss on
/// every token after the first.
pub fn dialogue_row(tok: &Tokenizer, max_seq_len: usize, dialogue: &DialogueHistory) -> Result<LmExample> {
    let mut tokens = serialize_input(tok, dialogue, &MetaKnowledge::None, max_seq_len)?;
    tokens.push(EOS);
    Ok(LmExample {
        tokens,
        response_start: 1,
    })
}

/// Complete dialogues (every turn including the last response) of a split.
pub fn dialogues(ds: &SkillDataset, split: Split) -> Vec<DialogueHistory> {
    let mut out: BTreeMap<&str, DialogueHistory> = BTreeMap::new();
    for e in ds.split(split) {
        let mut h = e.history.clone();
        h.push(Utterance::system(e.gold_response.clone()));
        let slot = out.entry(&e.dialogue_id).or_default();
        if h.turns().len() > slot.turns().len() {
            *slot = h;
        }
    }
    out.into_values().collect()
}

/// Standard LM training of an unfrozen backbone; freezes it on return and
/// records the content hash in the log notes (`backbone_hash`).
pub fn pretrain_backbone(
    model: &mut Backbone,
    train: &[LmExample],
    valid: &[LmExample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if model.is_frozen() {
        return Err(Error::State("cannot pretrain a frozen backbone".into()));
    }
    let grad_of = |m: &Backbone, i: usize| -> Result<ExampleGrad> {
        let ex = &train[i];
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true);
        let logits = m.forward_graph(&mut g, &vars, ex.input(), None)?;
        let loss = g.cross_entropy_masked(logits, &ex.targets(), 1.0)?;
        g.backward(loss)?;
        let l = g.value(loss).data()[0] as f64;
        let grads = vars
            .all()
            .into_iter()
            .map(|v| g.take_grad(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        Ok(ExampleGrad {
            loss: l,
            weight: ex.n_targets() as f64,
            grads,
            backbone_grad_norm: 0.0,
        })
    };
    let evaluate = |m: &Backbone| m.perplexity(None, valid);
    let mut log = fit("pretrain", "val_ppl", cfg, model, train.len(), grad_of, evaluate)?;
    let hash = model.freeze();
    log.notes.insert("backbone_hash".into(), hash);
    Ok(log)
}

/// Validation perplexity of `stack` from cached first-block outputs.
fn cached_perplexity(backbone: &Backbone, stack: &AdapterStack, rows: &[LmExample], cache: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (ex, x0) in rows.iter().zip(cache) {
        let mut g = Graph::new();
        let vars = backbone.bind(&mut g, false);
        let av = stack.bind(&mut g, false);
        let x = g.constant(x0);
        let logits = backbone.forward_from(&mut g, &vars, x, 0, Some(&av))?;
        let loss = g.cross_entropy_masked(logits, &ex.targets(), 1.0)?;
        total += g.value(loss).data()[0] as f64;
        count += ex.n_targets();
    }
    if count == 0 {
        return Err(Error::Contract("perplexity of an empty corpus".into()));
    }
    Ok((total / count as f64).exp())
}

/// Trains one adapter stack over a frozen backbone and seals it.
///
/// Audits: the backbone must be frozen and its content hash unchanged
/// afterwards; no backbone tensor may receive a gradient; on the first batch
/// every context position's logit gradient must be exactly zero.
pub fn train_adapter(
    backbone: &Backbone,
    mut stack: AdapterStack,
    train: &[LmExample],
    valid: &[LmExample],
    cfg: &TrainConfig,
) -> Result<(AdapterStack, TrainLog)> {
    if !backbone.is_frozen() {
        return Err(Error::Contract("adapters must be trained over a frozen backbone".into()));
    }
    if stack.is_sealed() {
        return Err(Error::State("adapter stack is already sealed".into()));
    }
    stack.check_compatible(backbone.config())?;
    if valid.is_empty() {
        return Err(Error::Contract("adapter training needs validation rows".into()));
    }
    let hash_before = backbone.content_hash();
    let train_cache = train
        .iter()
        .map(|e| backbone.first_block(e.input()))
        .collect::<Result<Vec<_>>>()?;
    let valid_cache = valid
        .iter()
        .map(|e| backbone.first_block(e.input()))
        .collect::<Result<Vec<_>>>()?;
    let mut audited = 0usize;
    let audit_rows = cfg.batch_size.min(train.len());

    let grad_of = |s: &AdapterStack, i: usize| -> Result<ExampleGrad> {
        let ex = &train[i];
        let targets = ex.targets();
        let mut g = Graph::new();
        let vars = backbone.bind(&mut g, false);
        let av = s.bind(&mut g, true);
        let x = g.constant(&train_cache[i]);
        let logits = backbone.forward_from(&mut g, &vars, x, 0, Some(&av))?;
        let loss = g.cross_entropy_masked(logits, &targets, 1.0)?;
        g.backward(loss)?;
        let backbone_grad_norm = vars
            .all()
            .into_iter()
            .map(|v| g.grad(v).map_or(0.0, sq_norm))
            .sum::<f64>()
            .sqrt();
        if backbone_grad_norm != 0.0 {
            return Err(Error::Isolation(format!(
                "backbone received gradient norm {backbone_grad_norm}"
            )));
        }
        if audited < audit_rows {
            audited += 1;
            let v = backbone.config().vocab_size;
            let dl = g.grad(logits).ok_or_else(|| Error::Contract("no logit gradient".into()))?;
            for (r, t) in targets.iter().enumerate() {
                if t.is_none() && dl[r * v..(r + 1) * v].iter().any(|&x| x != 0.0) {
                    return Err(Error::Contract(format!("context position {r} leaks gradient")));
                }
            }
        }
        let l = g.value(loss).data()[0] as f64;
        let grads = av
            .all()
            .into_iter()
            .map(|v| g.take_grad(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        Ok(ExampleGrad {
            loss: l,
            weight: ex.n_targets() as f64,
            grads,
            backbone_grad_norm,
        })
    };
    let evaluate = |s: &AdapterStack| cached_perplexity(backbone, s, valid, &valid_cache);
    let task = format!("adapter:{}", stack.meta.name);
    let mut log = fit(&task, "val_ppl", cfg, &mut stack, train.len(), grad_of, evaluate)?;

    let hash_after = backbone.content_hash();
    if hash_after != hash_before {
        return Err(Error::Isolation("backbone changed during adapter training".into()));
    }
    stack.meta.epochs = log.epochs;
    stack.seal();
    log.notes.insert("backbone_hash".into(), hash_after);
    log.notes.insert("adapter_hash".into(), stack.content_hash());
    log.notes.insert("loss_mask_audited_rows".into(), audit_rows.to_string());
    Ok((stack, log))
}

/// Routing examples from dataset turns, one per requested mode.
pub fn routing_examples(
    datasets: &[(SkillId, &SkillDataset)],
    split: Split,
    modes: &[HistoryMode],
) -> Vec<RoutingExample> {
    let mut out = Vec::new();
    for (id, ds) in datasets {
        for e in ds.split(split) {
            for &mode in modes {
                out.push(RoutingExample {
                    history: e.history.clone(),
                    label: *id,
                    mode,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingAccuracy {
    pub mode: HistoryMode,
    pub n: usize,
    pub accuracy: f64,
}

pub fn routing_accuracy(m: &Manager, tok: &Tokenizer, examples: &[RoutingExample]) -> Result<Vec<RoutingAccuracy>> {
    let mut by_mode: BTreeMap<String, (HistoryMode, usize, usize)> = BTreeMap::new();
    for e in examples {
        let (pred, _) = m.predict(tok, &e.history, e.mode)?;
        let slot = by_mode.entry(format!("{:?}", e.mode)).or_insert((e.mode, 0, 0));
        slot.1 += 1;
        slot.2 += usize::from(pred == e.label);
    }
    Ok(by_mode
        .into_values()
        .map(|(mode, n, hits)| RoutingAccuracy {
            mode,
            n,
            accuracy: hits as f64 / n as f64,
        })
        .collect())
}

/// Cross-entropy training of the manager with early stopping on
/// validation loss.
pub fn train_manager(
    tok: &Tokenizer,
    train: &[RoutingExample],
    valid: &[RoutingExample],
    config: ManagerConfig,
    cfg: &TrainConfig,
) -> Result<(Manager, TrainLog)> {
    let labels: Vec<SkillId> = train.iter().map(|e| e.label).collect();
    let mut model = Manager::init(config, labels, cfg.seed)?;
    let encode = |set: &[RoutingExample]| -> Result<Vec<(Vec<TokenId>, u32)>> {
        set.iter()
            .map(|e| Ok((model.encode(tok, &e.history, e.mode)?, model.class_of(e.label)? as u32)))
            .collect()
    };
    let train_rows = encode(train)?;
    let valid_rows = encode(valid)?;
    if valid_rows.is_empty() {
        return Err(Error::Contract("manager training needs validation examples".into()));
    }
    let grad_of = |m: &Manager, i: usize| -> Result<ExampleGrad> {
        let (ids, class) = &train_rows[i];
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true);
        let logits = m.logits_graph(&mut g, &vars, ids)?;
        let loss = g.cross_entropy(logits, &[*class])?;
        g.backward(loss)?;
        let l = g.value(loss).data()[0] as f64;
        let grads = vars
            .into_iter()
            .map(|v| g.take_grad(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        Ok(ExampleGrad {
            loss: l,
            weight: 1.0,
            grads,
            backbone_grad_norm: 0.0,
        })
    };
    let evaluate = |m: &Manager| -> Result<f64> {
        let mut total = 0.0;
        for (ids, class) in &valid_rows {
            let p = m.probabilities(ids)?;
            total -= p[*class as usize].max(1e-300).ln();
        }
        Ok(total / valid_rows.len() as f64)
    };
    let mut log = fit("manager", "val_loss", cfg, &mut model, train_rows.len(), grad_of, evaluate)?;
    model.mark_trained();
    for acc in routing_accuracy(&model, tok, valid)? {
        log.notes.insert(format!("valid_accuracy_{:?}", acc.mode).to_lowercase(), format!("{:.4}", acc.accuracy));
    }
    Ok((model, log))
}

/// One classifier per style skill: its responses against those of the other
/// style skills (or of every other skill when it is the only style).
pub fn train_styles(
    skills: &[(SkillId, Family, &SkillDataset)],
    cfg: &StyleTrainConfig,
) -> Result<Vec<(StyleClassifier, StyleReport)>> {
    let texts = |ds: &SkillDataset| -> Vec<String> {
        let mut v: Vec<String> = ds.examples.iter().map(|e| e.gold_response.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let styles: Vec<&(SkillId, Family, &SkillDataset)> =
        skills.iter().filter(|(_, f, _)| *f == Family::Style).collect();
    let mut out = Vec::new();
    for (id, _, ds) in &styles {
        let others: Vec<&(SkillId, Family, &SkillDataset)> = if styles.len() > 1 {
            styles.iter().copied().filter(|(o, _, _)| o != id).collect()
        } else {
            skills.iter().filter(|(o, _, _)| o != id).collect()
        };
        let negative: Vec<String> = others.iter().flat_map(|(_, _, d)| texts(d)).collect();
        out.push(train_style_classifier(id.0, &texts(ds), &negative, cfg)?);
    }
    Ok(out)
}

/// Everything needed to train and register one skill.
#[derive(Clone, Debug)]
pub struct SkillPlan {
    pub name: String,
    pub family: Family,
    pub corpus_id: String,
    /// Adapter initialization and shuffling seed.
    pub seed: u64,
    pub train: Vec<LmExample>,
    pub valid: Vec<LmExample>,
    /// Probe inputs for the isolation audit.
    pub probes: Vec<(DialogueHistory, MetaKnowledge)>,
}

impl SkillPlan {
    pub fn from_dataset(
        tok: &Tokenizer,
        max_seq_len: usize,
        ds: &SkillDataset,
        family: Family,
        corpus_id: &str,
        seed: u64,
        n_probes: usize,
    ) -> Result<Self> {
        Ok(Self {
            name: ds.skill.clone(),
            family,
            corpus_id: corpus_id.to_string(),
            seed,
            train: lm_examples(tok, max_seq_len, ds, Split::Train)?,
            valid: lm_examples(tok, max_seq_len, ds, Split::Valid)?,
            probes: ds
                .split(Split::Test)
                .into_iter()
                .take(n_probes)
                .map(|e| (e.history.clone(), e.meta.clone()))
                .collect(),
        })
    }
}

/// Greedy outputs and last-position logits for every registered skill's probes.
type ProbeSnapshot = Vec<(SkillId, Vec<(Vec<TokenId>, Vec<u8>)>)>;

fn probe(engine: &Engine, probes: &BTreeMap<SkillId, Vec<(DialogueHistory, MetaKnowledge)>>) -> Result<ProbeSnapshot> {
    let decode = DecodeParams {
        max_new_tokens: 12,
        ..DecodeParams::greedy()
    };
    let mut out = Vec::new();
    for (&id, ps) in probes {
        let stack = engine.adapters().get(id)?;
        let mut rows = Vec::new();
        for (h, m) in ps {
            let r = engine.respond(h, m, id, &decode)?;
            let ctx = engine.context(h, m, &decode)?;
            let logits = engine.backbone().forward(&ctx, Some(stack))?;
            rows.push((r.tokens, logits.row(logits.rows() - 1).iter().flat_map(|v| v.to_le_bytes()).collect()));
        }
        out.push((id, rows));
    }
    Ok(out)
}

/// Trains and registers each plan in order. After every registration the
/// backbone hash and all earlier skills' probe outputs must be unchanged.
/// `cfg_for` supplies each plan's settings, seed included.
pub fn train_all(
    engine: &mut Engine,
    plans: &[SkillPlan],
    bottleneck: usize,
    cfg_for: impl Fn(&SkillPlan) -> TrainConfig,
    mut on_trained: impl FnMut(SkillId, &AdapterStack, &TrainLog),
) -> Result<Vec<TrainLog>> {
    let backbone_hash = engine.backbone().content_hash();
    let mut probes: BTreeMap<SkillId, Vec<(DialogueHistory, MetaKnowledge)>> = engine
        .adapters()
        .ids()
        .map(|id| (id, Vec::new()))
        .collect();
    let mut logs = Vec::new();
    for plan in plans {
        let before = probe(engine, &probes)?;
        let mut stack = AdapterStack::init(engine.backbone().config(), bottleneck, plan.seed)?;
        stack.meta.name = plan.name.clone();
        stack.meta.family = plan.family.as_str().to_string();
        stack.meta.corpus_id = plan.corpus_id.clone();
        let (stack, log) = train_adapter(engine.backbone(), stack, &plan.train, &plan.valid, &cfg_for(plan))?;
        let id = engine.register(stack)?;
        on_trained(id, engine.adapters().get(id)?, &log);
        if engine.backbone().content_hash() != backbone_hash {
            return Err(Error::Isolation("backbone hash changed".into()));
        }
        let after = probe(engine, &probes)?;
        if before != after {
            return Err(Error::Isolation(format!(
                "registering {:?} changed earlier skills' outputs",
                plan.name
            )));
        }
        probes.insert(id, plan.probes.clone());
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["a b c d e f g h"])
    }

    fn rows(t: &Tokenizer) -> Vec<LmExample> {
        let h = |u: &str| DialogueHistory::new(vec![Utterance::user(u)]);
        vec![
            training_row(t, 16, &h("a b"), &MetaKnowledge::None, "c d").unwrap(),
            training_row(t, 16, &h("e f"), &MetaKnowledge::None, "g h").unwrap(),
            training_row(t, 16, &h("a f"), &MetaKnowledge::None, "c h").unwrap(),
        ]
    }

    fn cfg(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            max_seq_len: 16,
            bottleneck: 4,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size), (6e-4, 16));
        c.patience = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unfrozen_backbone_is_contract_error() {
        let t = tok();
        let b = Backbone::build(cfg(t.len()), 0).unwrap();
        let s = AdapterStack::init(b.config(), 4, 0).unwrap();
        let r = train_adapter(&b, s, &rows(&t), &rows(&t), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn adapter_training_learns_and_keeps_backbone() {
        let t = tok();
        let mut b = Backbone::build(cfg(t.len()), 0).unwrap();
        let hash = b.freeze();
        let s = AdapterStack::init(b.config(), 4, 1).unwrap();
        let data = rows(&t);
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 2,
            max_epochs: 15,
            ..Default::default()
        };
        let (s, log) = train_adapter(&b, s, &data, &data, &tc).unwrap();
        assert!(s.is_sealed());
        assert_eq!(b.content_hash(), hash);
        assert!(log.steps.iter().all(|r| r.backbone_grad_norm == 0.0));
        assert!(log.best < log.initial);
        // The returned stack is the best one, and its perplexity matches the
        // uncached path.
        let ppl = b.perplexity(Some(&s), &data).unwrap();
        assert!((ppl - log.best).abs() < 1e-9 * ppl, "{ppl} vs {}", log.best);
    }

    #[test]
    fn pretraining_freezes() {
        let t = tok();
        let mut b = Backbone::build(cfg(t.len()), 0).unwrap();
        let data = rows(&t);
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 3,
            max_epochs: 3,
            ..Default::default()
        };
        let log = pretrain_backbone(&mut b, &data, &data, &tc).unwrap();
        assert!(b.is_frozen());
        assert!(log.best < log.initial);
        assert_eq!(log.notes["backbone_hash"], b.content_hash());
        assert!(matches!(pretrain_backbone(&mut b, &data, &data, &tc), Err(Error::State(_))));
    }

    #[test]
    fn log_records_are_line_delimited_json() {
        let log = TrainLog {
            task: "x".into(),
            steps: vec![StepRecord {
                step: 1,
                epoch: 1,
                loss: 2.0,
                backbone_grad_norm: 0.0,
            }],
            ..Default::default()
        };
        let text = log.to_jsonl();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["record"], "header");
        assert_eq!(lines[1]["record"], "step");
        assert_eq!(lines[2]["record"], "summary");
    }

    #[test]
    fn separable_manager() {
        let t = Tokenizer::from_texts(["red green blue", "cat dog fish"]);
        let ex = |text: &str, label| RoutingExample {
            history: DialogueHistory::new(vec![Utterance::user(text)]),
            label: SkillId(label),
            mode: HistoryMode::SingleTurn,
        };
        let train: Vec<RoutingExample> = ["red", "green", "blue", "red green", "blue red"]
            .iter()
            .map(|s| ex(s, 1))
            .chain(["cat", "dog", "fish", "cat dog", "fish cat"].iter().map(|s| ex(s, 2)))
            .collect();
        let valid = vec![ex("green blue", 1), ex("dog fish", 2)];
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            max_epochs: 40,
            patience: 40,
            ..Default::default()
        };
        let (m, _) = train_manager(&t, &train, &valid, ManagerConfig::small(t.len()), &tc).unwrap();
        let acc = routing_accuracy(&m, &t, &valid).unwrap();
        assert_eq!(acc[0].accuracy, 1.0);
        let one: Vec<RoutingExample> = train.iter().filter(|e| e.label == SkillId(1)).cloned().collect();
        assert!(matches!(
            train_manager(&t, &one, &valid, ManagerConfig::small(t.len()), &tc),
            Err(Error::Degenerate(_))
        ));
    }
}
