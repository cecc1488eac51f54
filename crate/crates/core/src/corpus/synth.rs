use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{render, KnowledgeSource, Resources, SkillSpec, SuiteSpec};
use super::{SkillDataset, TurnExample};
use crate::dialogue::{DialogueHistory, MetaKnowledge, TableRow, Utterance};
use crate::error::{Error, Result};
use crate::knowledge::content_tokens;
use crate::tokenizer::normalize;

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn need<'a, T>(res: &'a Option<T>, skill: &str, what: &str) -> Result<&'a T> {
    res.as_ref()
        .ok_or_else(|| Error::Spec(format!("skill {skill:?} needs a {what} but the suite has none")))
}

/// Every token of `entity` occurs in the knowledge, in order.
fn grounded(entity: &str, meta: &MetaKnowledge) -> bool {
    let k = normalize(&meta.linearize().unwrap_or_default());
    let e = normalize(entity);
    !e.is_empty() && k.windows(e.len()).any(|w| w == &e[..])
}

/// Generates `n_dialogues` dialogues for one skill. Output depends only on
/// the spec, the resources and the resolved seed.
pub fn synth(spec: &SkillSpec, res: &Resources, suite_seed: u64, n_dialogues: usize) -> Result<SkillDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.resolved_seed(suite_seed));
    let n = spec.n_dialogues.unwrap_or(n_dialogues);
    let mut examples = Vec::with_capacity(n * spec.exchanges.len());
    for d in 0..n {
        let dialogue_id = format!("{}-{d:04}", spec.name);
        let mut values: BTreeMap<String, String> = spec
            .slots
            .iter()
            .map(|(k, opts)| (k.clone(), pick(&mut rng, opts).clone()))
            .collect();
        let mut fixed_meta = MetaKnowledge::None;
        match spec.knowledge {
            KnowledgeSource::None => {}
            KnowledgeSource::Text => {
                let t = spec.knowledge_text.as_deref().expect("validated");
                fixed_meta = MetaKnowledge::text(render(t, &values)?);
            }
            KnowledgeSource::Fixture => {
                let fx = need(&res.fixture, &spec.name, "fixture")?;
                let row = pick(&mut rng, fx.rows());
                values.insert("location".into(), row.location.clone());
                let rows = spec
                    .table
                    .iter()
                    .map(|r| {
                        Ok(TableRow {
                            slot: r.slot.clone(),
                            value: render(&r.value, &values)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                fixed_meta = MetaKnowledge::Table { rows };
            }
            KnowledgeSource::Graph => {
                let g = need(&res.graph, &spec.name, "graph")?;
                let entities: Vec<&String> = g.entities().iter().collect();
                let entity = (*pick(&mut rng, &entities)).clone();
                let MetaKnowledge::Graph { triples } = g.neighbors(&entity) else {
                    return Err(Error::Spec(format!("entity {entity:?} has no neighbors")));
                };
                let first = &triples[0];
                let key = content_tokens(&entity);
                let neighbor = if content_tokens(&first.head) == key {
                    &first.tail
                } else {
                    &first.head
                };
                values.insert("entity".into(), entity.clone());
                values.insert("head".into(), first.head.clone());
                values.insert("relation".into(), first.relation.clone());
                values.insert("tail".into(), first.tail.clone());
                values.insert("neighbor".into(), neighbor.clone());
            }
            KnowledgeSource::Docs => {
                let idx = need(&res.docs, &spec.name, "document index")?;
                let doc = pick(&mut rng, idx.docs());
                values.insert("title".into(), doc.title.clone());
                values.insert("paragraph".into(), doc.first_paragraph.clone());
            }
        }

        let mut history = DialogueHistory::default();
        for (k, block) in spec.exchanges.iter().enumerate() {
            let ex = pick(&mut rng, &block.options);
            let user = render(&ex.user, &values)?;
            let system = render(&ex.system, &values)?;
            history.push(Utterance::user(user.clone()));
            let meta = match spec.knowledge {
                KnowledgeSource::Graph => {
                    let m = res.graph.as_ref().expect("checked above").neighbors(&user);
                    if m != res.graph.as_ref().expect("checked").neighbors(&values["entity"]) {
                        return Err(Error::Spec(format!(
                            "{dialogue_id}: user turn {user:?} does not resolve to entity {:?}",
                            values["entity"]
                        )));
                    }
                    m
                }
                KnowledgeSource::Docs => {
                    let m = res.docs.as_ref().expect("checked above").knowledge_for(&user);
                    if m != MetaKnowledge::text(&values["paragraph"]) {
                        return Err(Error::Spec(format!(
                            "{dialogue_id}: user turn {user:?} does not retrieve {:?}",
                            values["title"]
                        )));
                    }
                    m
                }
                _ => fixed_meta.clone(),
            };
            let gold_entities = ex
                .entities
                .iter()
                .map(|e| render(e, &values))
                .collect::<Result<Vec<_>>>()?;
            for e in &gold_entities {
                if !grounded(e, &meta) {
                    return Err(Error::Spec(format!("{dialogue_id}: entity {e:?} is not in the knowledge")));
                }
            }
            examples.push(TurnExample {
                skill: spec.name.clone(),
                dialogue_id: dialogue_id.clone(),
                turn_index: 2 * k + 1,
                history: history.clone(),
                meta,
                gold_response: system.clone(),
                gold_entities,
            });
            history.push(Utterance::system(system));
        }
    }
    Ok(SkillDataset {
        skill: spec.name.clone(),
        examples,
    })
}

/// Word types (punctuation excluded) used anywhere in a skill's examples.
pub fn skill_vocabulary(ds: &SkillDataset) -> BTreeSet<String> {
    let mut v = BTreeSet::new();
    for e in &ds.examples {
        for u in e.history.turns() {
            v.extend(content_tokens(&u.text));
        }
        v.extend(content_tokens(&e.gold_response));
        if let Some(k) = e.meta.linearize() {
            v.extend(content_tokens(&k));
        }
    }
    v
}

/// A generated suite: the spec, its knowledge sources and one dataset per
/// skill (in spec order).
#[derive(Clone, Debug)]
pub struct Suite {
    pub spec: SuiteSpec,
    pub resources: Resources,
    pub datasets: Vec<SkillDataset>,
}

impl Suite {
    pub fn dataset(&self, name: &str) -> Option<&SkillDataset> {
        self.datasets.iter().find(|d| d.skill == name)
    }

    /// Every text a tokenizer must cover.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for d in &self.datasets {
            for e in &d.examples {
                out.extend(e.history.turns().iter().map(|u| u.text.clone()));
                out.push(e.gold_response.clone());
                out.extend(e.meta.linearize());
            }
        }
        out
    }
}

/// Generates every skill and enforces the suite-level lexical constraints:
/// total vocabulary within `max_vocab`, and for each skill at least
/// `min_unique_fraction` of its words used by no other skill.
pub fn synth_suite(spec: &SuiteSpec, res: &Resources) -> Result<Suite> {
    spec.validate()?;
    let datasets = spec
        .skills
        .iter()
        .map(|s| synth(s, res, spec.seed, spec.n_dialogues))
        .collect::<Result<Vec<_>>>()?;
    let vocabs: Vec<BTreeSet<String>> = datasets.iter().map(skill_vocabulary).collect();
    let total: BTreeSet<&String> = vocabs.iter().flatten().collect();
    if total.len() > spec.max_vocab {
        return Err(Error::Spec(format!(
            "suite vocabulary has {} words, limit {}",
            total.len(),
            spec.max_vocab
        )));
    }
    for (i, v) in vocabs.iter().enumerate() {
        let unique = v
            .iter()
            .filter(|w| vocabs.iter().enumerate().all(|(j, o)| j == i || !o.contains(*w)))
            .count();
        let frac = unique as f64 / v.len().max(1) as f64;
        if frac < spec.min_unique_fraction {
            return Err(Error::Spec(format!(
                "skill {:?}: only {:.1}% of its {} words are unique to it",
                datasets[i].skill,
                frac * 100.0,
                v.len()
            )));
        }
    }
    Ok(Suite {
        spec: spec.clone(),
        resources: res.clone(),
        datasets,
    })
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use super::*;
    use crate::corpus::{corpus_to_jsonl, parse_corpus, Split};

    #[test]
    fn reference_suite_generates() {
        let (spec, res) = SuiteSpec::reference();
        let t = Instant::now();
        let suite = synth_suite(&spec, &res).unwrap();
        assert!(t.elapsed().as_secs_f64() < 10.0);
        assert_eq!(suite.datasets.len(), 8);
        for d in &suite.datasets {
            assert_eq!(d.n_dialogues(), spec.n_dialogues);
            assert_eq!(d.examples.len(), spec.n_dialogues * 2);
            for split in [Split::Train, Split::Valid, Split::Test] {
                assert!(!d.split(split).is_empty(), "{} has an empty {split:?} split", d.skill);
            }
        }
        let total: BTreeSet<String> = suite.datasets.iter().flat_map(skill_vocabulary).collect();
        assert!(total.len() <= 250);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (spec, res) = SuiteSpec::reference();
        let a = corpus_to_jsonl(&synth_suite(&spec, &res).unwrap().datasets);
        let b = corpus_to_jsonl(&synth_suite(&spec, &res).unwrap().datasets);
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed += 1;
        let c = corpus_to_jsonl(&synth_suite(&other, &res).unwrap().datasets);
        assert_ne!(a, c);
    }

    #[test]
    fn jsonl_round_trip() {
        let (mut spec, res) = SuiteSpec::reference();
        spec.n_dialogues = 20;
        let suite = synth_suite(&spec, &res).unwrap();
        let text = corpus_to_jsonl(&suite.datasets);
        let back = parse_corpus(&text).unwrap();
        assert_eq!(back, suite.datasets);
    }

    #[test]
    fn grounded_entities_appear_in_knowledge() {
        let (mut spec, res) = SuiteSpec::reference();
        spec.n_dialogues = 50;
        let suite = synth_suite(&spec, &res).unwrap();
        for name in ["persona", "weather", "kg", "wiki"] {
            for e in &suite.dataset(name).unwrap().examples {
                assert!(!e.gold_entities.is_empty());
                for ent in &e.gold_entities {
                    assert!(grounded(ent, &e.meta), "{name}: {ent:?}");
                }
            }
        }
    }

    #[test]
    fn vocabulary_limit_is_enforced() {
        let (mut spec, res) = SuiteSpec::reference();
        spec.n_dialogues = 10;
        spec.max_vocab = 50;
        assert!(matches!(synth_suite(&spec, &res), Err(Error::Spec(_))));
        spec.max_vocab = 250;
        spec.min_unique_fraction = 0.9;
        assert!(matches!(synth_suite(&spec, &res), Err(Error::Spec(_))));
    }
}
