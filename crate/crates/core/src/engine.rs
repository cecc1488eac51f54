//! The response function: frozen backbone + one adapter stack per skill,
//! with optional routing and re-ranking.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterStack};
use crate::backbone::{Backbone, DecodeMode, DecodeParams, LmExample};
use crate::corpus::{Family, Resources};
use crate::dialogue::{DialogueHistory, MetaKnowledge, SkillId, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::manager::{HistoryMode, Manager};
use crate::reranker::{rerank, ScoredResponse, StyleClassifier};
use crate::tokenizer::{TokenId, Tokenizer, EOS, SEP_KNOW, SEP_SYS, SEP_USR};

/// `[SEP_KNOW] knowledge` followed by `[SEP_USR|SEP_SYS] turn` blocks.
///
/// When the result would exceed `budget`, whole turns are dropped from the
/// oldest end. The knowledge block and the final turn are always kept; a
/// final turn that alone overflows keeps its most recent tokens.
pub fn serialize_input(
    tok: &Tokenizer,
    history: &DialogueHistory,
    meta: &MetaKnowledge,
    budget: usize,
) -> Result<Vec<TokenId>> {
    history.validate()?;
    meta.validate()?;
    let turns = history.turns();
    if turns.is_empty() {
        return Err(Error::Contract("cannot serialize an empty history".into()));
    }
    let mut out = Vec::new();
    if let Some(k) = meta.linearize() {
        out.push(SEP_KNOW);
        out.extend(tok.encode(&k));
    }
    if out.len() >= budget {
        return Err(Error::KnowledgeTooLarge {
            len: out.len(),
            budget,
        });
    }
    let blocks: Vec<Vec<TokenId>> = turns
        .iter()
        .map(|u| {
            let sep = match u.speaker {
                Speaker::User => SEP_USR,
                Speaker::System => SEP_SYS,
            };
            std::iter::once(sep).chain(tok.encode(&u.text)).collect()
        })
        .collect();
    let room = budget - out.len();
    let last = blocks.last().expect("nonempty");
    if last.len() > room {
        // Keep the separator and the most recent tokens of the final turn.
        out.push(last[0]);
        out.extend_from_slice(&last[last.len() - (room - 1)..]);
        return Ok(out);
    }
    let mut used = last.len();
    let mut first = blocks.len() - 1;
    while first > 0 && used + blocks[first - 1].len() <= room {
        first -= 1;
        used += blocks[first].len();
    }
    for b in &blocks[first..] {
        out.extend_from_slice(b);
    }
    Ok(out)
}

/// Context, `[SEP_SYS]`, response and `EOS`; loss on the response and EOS.
pub fn training_row(
    tok: &Tokenizer,
    max_seq_len: usize,
    history: &DialogueHistory,
    meta: &MetaKnowledge,
    response: &str,
) -> Result<LmExample> {
    let resp = tok.encode(response);
    // The model sees every token but the last, so context + 1 + |resp| <= n_max.
    let budget = max_seq_len
        .checked_sub(resp.len() + 1)
        .filter(|b| *b > 0)
        .ok_or(Error::Length {
            len: resp.len() + 2,
            max: max_seq_len,
        })?;
    let mut tokens = serialize_input(tok, history, meta, budget)?;
    tokens.push(SEP_SYS);
    let response_start = tokens.len();
    tokens.extend(resp);
    tokens.push(EOS);
    Ok(LmExample {
        tokens,
        response_start,
    })
}

/// Called with the skill id and stack just before generation.
pub type StackHook = Arc<dyn Fn(SkillId, &AdapterStack) + Send + Sync>;

/// Registered skill, as exposed to clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillInfo {
    pub skill_id: SkillId,
    pub name: String,
    pub family: String,
    pub knowledge: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub utterance: Utterance,
    pub skill_id: SkillId,
    pub tokens: Vec<TokenId>,
    /// Every sampled candidate when re-ranking was requested.
    pub candidates: Vec<ScoredResponse>,
}

/// Immutable at serve time; cloning is cheap for the backbone.
#[derive(Clone)]
pub struct Engine {
    pub tokenizer: Arc<Tokenizer>,
    backbone: Arc<Backbone>,
    adapters: AdapterSet,
    manager: Option<Arc<Manager>>,
    styles: BTreeMap<u32, Arc<StyleClassifier>>,
    hook: Option<StackHook>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("vocab", &self.tokenizer.len())
            .field("backbone", &self.backbone.content_hash())
            .field("skills", &self.adapters.len())
            .field("manager", &self.manager.is_some())
            .field("styles", &self.styles.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Engine {
    pub fn new(tokenizer: Tokenizer, backbone: Backbone) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Contract("the engine needs a frozen backbone".into()));
        }
        if backbone.config().vocab_size != tokenizer.len() {
            return Err(Error::Config(format!(
                "backbone vocabulary {} does not match tokenizer {}",
                backbone.config().vocab_size,
                tokenizer.len()
            )));
        }
        Ok(Self {
            tokenizer: Arc::new(tokenizer),
            backbone: Arc::new(backbone),
            adapters: AdapterSet::new(),
            manager: None,
            styles: BTreeMap::new(),
            hook: None,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn manager(&self) -> Option<&Manager> {
        self.manager.as_deref()
    }

    pub fn style(&self, id: u32) -> Option<&StyleClassifier> {
        self.styles.get(&id).map(|s| &**s)
    }

    pub fn style_ids(&self) -> Vec<u32> {
        self.styles.keys().copied().collect()
    }

    pub fn register(&mut self, stack: AdapterStack) -> Result<SkillId> {
        self.adapters.register(stack, self.backbone.config())
    }

    pub fn set_manager(&mut self, manager: Manager) -> Result<()> {
        if manager.config().vocab_size != self.tokenizer.len() {
            return Err(Error::Config("manager vocabulary does not match the tokenizer".into()));
        }
        for id in manager.labels() {
            self.adapters.get(*id)?;
        }
        self.manager = Some(Arc::new(manager));
        Ok(())
    }

    pub fn set_style(&mut self, classifier: StyleClassifier) {
        self.styles.insert(classifier.style_id, Arc::new(classifier));
    }

    pub fn set_hook(&mut self, hook: StackHook) {
        self.hook = Some(hook);
    }

    pub fn skills(&self) -> Vec<SkillInfo> {
        self.adapters
            .iter()
            .map(|(id, s)| SkillInfo {
                skill_id: id,
                name: s.meta.name.clone(),
                family: s.meta.family.clone(),
                knowledge: s
                    .meta
                    .family
                    .parse::<Family>()
                    .map_or("none", Family::knowledge_kind)
                    .to_string(),
            })
            .collect()
    }

    pub fn family(&self, id: SkillId) -> Result<Option<Family>> {
        Ok(self.adapters.get(id)?.meta.family.parse().ok())
    }

    /// Context tokens plus the trailing `[SEP_SYS]` generation prompt.
    pub fn context(&self, history: &DialogueHistory, meta: &MetaKnowledge, decode: &DecodeParams) -> Result<Vec<TokenId>> {
        history.validate_for_response()?;
        let n_max = self.backbone.config().max_seq_len;
        let budget = n_max.saturating_sub(decode.max_new_tokens + 1);
        let mut ctx = serialize_input(&self.tokenizer, history, meta, budget)?;
        ctx.push(SEP_SYS);
        Ok(ctx)
    }

    /// Response with skill `t`'s adapter stack active.
    pub fn respond(
        &self,
        history: &DialogueHistory,
        meta: &MetaKnowledge,
        t: SkillId,
        decode: &DecodeParams,
    ) -> Result<Response> {
        decode.validate()?;
        let stack = self.adapters.get(t)?;
        let ctx = self.context(history, meta, decode)?;
        if let Some(hook) = &self.hook {
            hook(t, stack);
        }
        let Some(rr) = &decode.rerank else {
            let tokens = self.backbone.generate(&ctx, Some(stack), decode)?;
            return Ok(Response {
                utterance: Utterance::system(self.tokenizer.decode(&tokens)),
                skill_id: t,
                tokens,
                candidates: Vec::new(),
            });
        };
        if decode.mode != DecodeMode::TopK {
            return Err(Error::Config("re-ranking needs top_k decoding".into()));
        }
        let scorer = self
            .styles
            .get(&rr.style_id)
            .ok_or_else(|| Error::Config(format!("no style classifier for style {}", rr.style_id)))?;
        let mut raw = Vec::with_capacity(rr.n_candidates);
        for i in 0..rr.n_candidates {
            let sub = DecodeParams {
                seed: decode.seed.wrapping_add(i as u64),
                rerank: None,
                ..decode.clone()
            };
            let tokens = self.backbone.generate(&ctx, Some(stack), &sub)?;
            raw.push((self.tokenizer.decode(&tokens), tokens));
        }
        let candidates = rerank(raw, rr.style_id, scorer.as_ref())?;
        let best = candidates.iter().find(|c| c.chosen).expect("one chosen");
        Ok(Response {
            utterance: Utterance::system(best.text.clone()),
            skill_id: t,
            tokens: best.tokens.clone(),
            candidates,
        })
    }

    /// Routed skill and the manager's probability for it.
    pub fn predict_skill(&self, history: &DialogueHistory, mode: HistoryMode) -> Result<(SkillId, f64)> {
        let m = self
            .manager
            .as_ref()
            .ok_or_else(|| Error::State("no dialogue manager is loaded".into()))?;
        let (t, probs) = m.predict(&self.tokenizer, history, mode)?;
        let p = probs.iter().find(|(s, _)| *s == t).map_or(0.0, |(_, p)| *p);
        Ok((t, p))
    }

    /// Routes with the manager (multi-turn history), then responds.
    pub fn respond_auto(
        &self,
        history: &DialogueHistory,
        meta: &MetaKnowledge,
        decode: &DecodeParams,
    ) -> Result<(Response, f64)> {
        let (t, p) = self.predict_skill(history, HistoryMode::MultiTurn)?;
        Ok((self.respond(history, meta, t, decode)?, p))
    }

    /// Knowledge a skill consumes for `history`: retrieval on the last user
    /// turn, falling back to earlier user turns when it finds nothing.
    pub fn knowledge_for(
        &self,
        t: SkillId,
        history: &DialogueHistory,
        sources: &Resources,
        persona: Option<&str>,
    ) -> Result<MetaKnowledge> {
        let family = self.family(t)?;
        Ok(retrieve(family, history, sources, persona))
    }
}

/// Retrieval pipeline per skill family.
pub fn retrieve(
    family: Option<Family>,
    history: &DialogueHistory,
    sources: &Resources,
    persona: Option<&str>,
) -> MetaKnowledge {
    let users: Vec<&str> = history
        .turns()
        .iter()
        .rev()
        .filter(|u| u.speaker == Speaker::User)
        .map(|u| u.text.as_str())
        .collect();
    let first_hit = |f: &dyn Fn(&str) -> MetaKnowledge| {
        users
            .iter()
            .map(|u| f(u))
            .find(|m| !m.is_none())
            .unwrap_or_default()
    };
    match family {
        Some(Family::TableGrounded) => match (&sources.fixture, users.first()) {
            (Some(fx), Some(_)) => {
                // A location named in any recent user turn beats the default row.
                let named = users.iter().find(|u| fx.locate_named(u).is_some());
                fx.query(named.or(users.first()).expect("nonempty"))
            }
            _ => MetaKnowledge::None,
        },
        Some(Family::GraphGrounded) => match &sources.graph {
            Some(g) => first_hit(&|u| g.neighbors(u)),
            None => MetaKnowledge::None,
        },
        Some(Family::TextGrounded) => match &sources.docs {
            Some(d) => first_hit(&|u| d.knowledge_for(u)),
            None => MetaKnowledge::None,
        },
        Some(Family::Persona) => persona
            .filter(|p| !p.trim().is_empty())
            .map_or(MetaKnowledge::None, MetaKnowledge::text),
        _ => MetaKnowledge::None,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;
    use crate::backbone::ModelConfig;
    use crate::tokenizer::UNK;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["what is the weather in paris ? it is sunny . weather high low 32 c"])
    }

    fn h(turns: &[&str]) -> DialogueHistory {
        DialogueHistory::new(
            turns
                .iter()
                .enumerate()
                .map(|(i, t)| if i % 2 == 0 { Utterance::user(*t) } else { Utterance::system(*t) })
                .collect(),
        )
    }

    #[test]
    fn single_turn_no_knowledge() {
        let t = tok();
        let ids = serialize_input(&t, &h(&["what is the weather"]), &MetaKnowledge::None, 100).unwrap();
        let mut want = vec![SEP_USR];
        want.extend(t.encode("what is the weather"));
        assert_eq!(ids, want);
    }

    #[test]
    fn table_is_linearized_first() {
        let t = tok();
        let meta = MetaKnowledge::table([("Weather", "Sunny")]);
        let ids = serialize_input(&t, &h(&["weather ?"]), &meta, 100).unwrap();
        assert_eq!(ids[0], SEP_KNOW);
        assert_eq!(&ids[1..4], &t.encode("weather is sunny")[..]);
        assert!(!ids.contains(&UNK));
    }

    #[test]
    fn oldest_turns_dropped_first() {
        let t = tok();
        let hist = h(&["what is the weather", "it is sunny", "in paris ?"]);
        let full = serialize_input(&t, &hist, &MetaKnowledge::None, 100).unwrap();
        assert_eq!(full.len(), 5 + 4 + 4);
        let cut = serialize_input(&t, &hist, &MetaKnowledge::None, 12).unwrap();
        assert_eq!(cut.len(), 8);
        assert_eq!(cut[0], SEP_SYS);
        assert_eq!(&cut[4..], &full[9..]);
        let only_last = serialize_input(&t, &hist, &MetaKnowledge::None, 5).unwrap();
        assert_eq!(only_last, &full[9..]);
        let squeezed = serialize_input(&t, &hist, &MetaKnowledge::None, 3).unwrap();
        assert_eq!(squeezed, [SEP_USR, full[11], full[12]]);
    }

    #[test]
    fn knowledge_is_never_dropped() {
        let t = tok();
        let meta = MetaKnowledge::table([("High", "32 C"), ("Low", "32 C")]);
        let hist = h(&["what is the weather", "it is sunny", "in paris ?"]);
        let ids = serialize_input(&t, &hist, &meta, 14).unwrap();
        assert_eq!(ids[0], SEP_KNOW);
        assert_eq!(*ids.last().unwrap(), t.id("?").unwrap());
        let err = serialize_input(&t, &hist, &meta, 10).unwrap_err();
        assert!(matches!(err, Error::KnowledgeTooLarge { len: 10, budget: 10 }));
    }

    #[test]
    fn training_row_masks_context() {
        let t = tok();
        let ex = training_row(&t, 64, &h(&["weather ?"]), &MetaKnowledge::None, "it is sunny .").unwrap();
        assert_eq!(ex.tokens[ex.response_start - 1], SEP_SYS);
        assert_eq!(*ex.tokens.last().unwrap(), EOS);
        assert_eq!(ex.n_targets(), 5);
        let targets = ex.targets();
        assert!(targets[..ex.response_start - 1].iter().all(Option::is_none));
        assert!(targets[ex.response_start - 1..].iter().all(Option::is_some));
    }

    fn engine() -> Engine {
        let t = tok();
        let cfg = ModelConfig {
            vocab_size: t.len(),
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            max_seq_len: 40,
            bottleneck: 4,
        };
        let mut b = Backbone::build(cfg.clone(), 3).unwrap();
        b.freeze();
        let mut e = Engine::new(t, b).unwrap();
        for seed in [1, 2] {
            let mut s = AdapterStack::init(&cfg, 4, seed).unwrap();
            s.layers[0].w_up = crate::tensor::Tensor::filled(&[4, 16], 0.3 * seed as f32);
            s.seal();
            e.register(s).unwrap();
        }
        e
    }

    #[test]
    fn respond_uses_requested_stack() {
        let mut e = engine();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        e.set_hook(Arc::new(move |id, stack: &AdapterStack| {
            log.lock().unwrap().push((id, stack.content_hash()));
        }));
        let hist = h(&["what is the weather"]);
        let mut d = DecodeParams::greedy();
        d.max_new_tokens = 5;
        for t in [SkillId(2), SkillId(1), SkillId(2)] {
            let r = e.respond(&hist, &MetaKnowledge::None, t, &d).unwrap();
            assert_eq!(r.skill_id, t);
        }
        let seen = seen.lock().unwrap();
        let ids: Vec<SkillId> = seen.iter().map(|(i, _)| *i).collect();
        assert_eq!(ids, [SkillId(2), SkillId(1), SkillId(2)]);
        for (id, hash) in seen.iter() {
            assert_eq!(hash, &e.adapters().get(*id).unwrap().content_hash());
        }
        assert!(matches!(
            e.respond(&hist, &MetaKnowledge::None, SkillId(3), &d),
            Err(Error::Routing(3))
        ));
    }

    #[test]
    fn greedy_is_deterministic() {
        let e = engine();
        let hist = h(&["what is the weather"]);
        let d = DecodeParams::greedy();
        let a = e.respond(&hist, &MetaKnowledge::None, SkillId(1), &d).unwrap();
        let b = e.respond(&hist, &MetaKnowledge::None, SkillId(1), &d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auto_without_manager_is_state_error() {
        let e = engine();
        let r = e.respond_auto(&h(&["hi"]), &MetaKnowledge::None, &DecodeParams::greedy());
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn rerank_requires_classifier_and_sampling() {
        let e = engine();
        let hist = h(&["what is the weather"]);
        let mut d = DecodeParams::top_k(4, 1.0, 0);
        d.max_new_tokens = 4;
        d.rerank = Some(crate::backbone::RerankParams {
            style_id: 9,
            n_candidates: 3,
        });
        assert!(matches!(e.respond(&hist, &MetaKnowledge::None, SkillId(1), &d), Err(Error::Config(_))));
        d.mode = DecodeMode::Greedy;
        assert!(matches!(e.respond(&hist, &MetaKnowledge::None, SkillId(1), &d), Err(Error::Config(_))));
    }
}
