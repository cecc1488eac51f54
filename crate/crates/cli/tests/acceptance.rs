//! End-to-end acceptance run on the reference suite: trains the full
//! pipeline once and checks every headline guarantee against it, printing
//! one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use adapterbot::adapters::{adapter_param_count, AdapterStack};
use adapterbot::backbone::DecodeParams;
use adapterbot::corpus::{synth_suite, Split, Suite, SuiteSpec};
use adapterbot::dialogue::{DialogueHistory, MetaKnowledge, SkillId, Triple};
use adapterbot::engine::Engine;
use adapterbot::knowledge::{Document, DocumentIndex, KnowledgeGraph};
use adapterbot::manager::HistoryMode;
use adapterbot::metrics::{self, metric_tokens};
use adapterbot::oracles;
use adapterbot::pipeline::{self, ArtifactDir, PipelineConfig};
use adapterbot::reranker::{rerank, select_best};
use adapterbot::trainer::{self, SkillPlan, TrainLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<(bool, String), String>;

struct Report {
    lines: Vec<(usize, &'static str, bool, String, Duration)>,
}

impl Report {
    fn record(&mut self, n: usize, name: &'static str, started: Instant, outcome: Outcome) {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let took = started.elapsed();
        println!("{} [{n}] {name}: {detail} ({:.1}s)", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
        self.lines.push((n, name, ok, detail, took));
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn bits(t: &adapterbot::tensor::Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn param_count() -> Outcome {
    let c = adapter_param_count(24, 1024, 200);
    let pct = (c.projections as f64 / 345_000_000.0 * 1000.0).round() / 10.0;
    Ok((
        c.projections == 9_830_400 && pct == 2.8,
        format!("{} projection parameters, {pct}% of 345M", c.projections),
    ))
}

fn identity_at_init(engine: &Engine) -> Outcome {
    let bb = engine.backbone();
    let cfg = bb.config();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut differing = 0;
    for i in 0..100 {
        let len = rng.random_range(1..=cfg.max_seq_len);
        let ids: Vec<_> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let stack = AdapterStack::init(cfg, cfg.bottleneck, 1000 + i).map_err(err)?;
        let with = bb.forward(&ids, Some(&stack)).map_err(err)?;
        let bare = bb.forward(&ids, None).map_err(err)?;
        differing += usize::from(bits(&with) != bits(&bare));
    }
    Ok((differing == 0, format!("{differing} of 100 probe sequences differ")))
}

fn greedy_probe(engine: &Engine, id: SkillId, probes: &[(DialogueHistory, MetaKnowledge)]) -> Result<Vec<Vec<u32>>, String> {
    let decode = DecodeParams {
        max_new_tokens: 16,
        ..DecodeParams::greedy()
    };
    probes
        .iter()
        .map(|(h, m)| engine.respond(h, m, id, &decode).map(|r| r.tokens).map_err(err))
        .collect()
}

/// Registered skills in training order with their probe inputs and outputs.
struct Trained {
    logs: Vec<(String, TrainLog)>,
    hashes: BTreeMap<String, String>,
    isolation_breaks: Vec<String>,
}

/// Trains `plans` one at a time; after each, re-probes every earlier skill.
fn train_sequentially(engine: &mut Engine, plans: &[SkillPlan], cfg: &PipelineConfig, verbose: bool) -> Result<Trained, String> {
    let mut seen: Vec<(SkillId, &SkillPlan, Vec<Vec<u32>>)> = Vec::new();
    let mut out = Trained {
        logs: Vec::new(),
        hashes: BTreeMap::new(),
        isolation_breaks: Vec::new(),
    };
    for plan in plans {
        let mut id = None;
        let logs = trainer::train_all(
            engine,
            std::slice::from_ref(plan),
            cfg.bottleneck,
            |p| cfg.adapter_config(p.family, p.seed),
            |sid, stack, log| {
                id = Some(sid);
                if verbose {
                    println!(
                        "    trained {:<10} epochs {:>3} valid ppl {:.4} / backbone {:.4} ({:.0}s)",
                        stack.meta.name, log.epochs, log.best, log.initial, log.wall_clock_s
                    );
                }
            },
        )
        .map_err(err)?;
        let id = id.expect("one plan trained");
        for (prev, p, before) in &seen {
            if &greedy_probe(engine, *prev, &p.probes)? != before {
                out.isolation_breaks.push(format!("{} after {}", p.name, plan.name));
            }
        }
        seen.push((id, plan, greedy_probe(engine, id, &plan.probes)?));
        out.hashes.insert(plan.name.clone(), engine.adapters().get(id).map_err(err)?.content_hash());
        out.logs.push((plan.name.clone(), logs.into_iter().next().expect("one log")));
    }
    Ok(out)
}

fn frozen_backbone(trained: &Trained, hash: &str, now: &str) -> Outcome {
    let mut steps = 0;
    let mut nonzero = 0;
    let mut hash_mismatch = Vec::new();
    for (name, log) in &trained.logs {
        steps += log.steps.len();
        nonzero += log.steps.iter().filter(|s| s.backbone_grad_norm != 0.0).count();
        if log.notes.get("backbone_hash").map(String::as_str) != Some(hash) {
            hash_mismatch.push(name.clone());
        }
    }
    Ok((
        nonzero == 0 && hash_mismatch.is_empty() && now == hash && steps > 0,
        format!(
            "{} adapters, {steps} steps, {nonzero} nonzero backbone grad norms, hash changed for {:?}",
            trained.logs.len(),
            hash_mismatch
        ),
    ))
}

fn isolation(first: &Trained, permuted: &Trained) -> Outcome {
    let differing: Vec<_> = first
        .hashes
        .iter()
        .filter(|(name, h)| permuted.hashes.get(*name) != Some(h))
        .map(|(n, _)| n.clone())
        .collect();
    let breaks: Vec<_> = first.isolation_breaks.iter().chain(&permuted.isolation_breaks).collect();
    Ok((
        differing.is_empty() && breaks.is_empty() && first.hashes.len() == permuted.hashes.len(),
        format!(
            "{} skills; probe changes {:?}; weights differ under reversed order for {:?}",
            first.hashes.len(),
            breaks,
            differing
        ),
    ))
}

fn adapters_learn(trained: &Trained, defaults: &[String]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, log) in trained.logs.iter().filter(|(n, _)| defaults.contains(n)) {
        let ratio = log.best / log.initial;
        ok &= ratio <= 0.7;
        parts.push(format!("{name} {ratio:.3}"));
    }
    ok &= parts.len() == defaults.len();
    Ok((ok, format!("ppl ratio {}", parts.join(", "))))
}

fn routing(engine: &Engine, suite: &Suite, cfg: &PipelineConfig, seed: u64) -> Result<(Outcome, Engine), String> {
    let (m, _) = pipeline::train_manager(engine, suite, cfg, seed).map_err(err)?;
    let mut routed = engine.clone();
    routed.set_manager(m).map_err(err)?;
    let mut acc = BTreeMap::new();
    for mode in [HistoryMode::SingleTurn, HistoryMode::MultiTurn] {
        let set = pipeline::routing_test_set(&routed, suite, mode);
        let r = trainer::routing_accuracy(routed.manager().expect("set"), &routed.tokenizer, &set).map_err(err)?;
        acc.insert(format!("{mode:?}"), (r[0].accuracy, r[0].n));
    }
    let (single, n1) = acc["SingleTurn"];
    let (multi, n2) = acc["MultiTurn"];
    let outcome = Ok((
        multi >= 0.90 && single >= 0.85 && multi >= single,
        format!("single-turn {single:.4} (n={n1}), multi-turn {multi:.4} (n={n2})"),
    ));
    Ok((outcome, routed))
}

fn gradients() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..100 {
        for case in oracles::gradcheck::op_cases(seed) {
            let e = oracles::gradcheck::check_case(&case, seed).map_err(err)?;
            let w = worst.entry(case.name).or_default();
            *w = w.max(e);
        }
    }
    let (name, max) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (*n, *e))
        .unwrap_or(("none", f64::INFINITY));
    Ok((max < 1e-4, format!("{} ops, worst {name} {max:.2e}", worst.len())))
}

const WORDS: &[&str] = &[
    "river", "stone", "light", "north", "music", "garden", "engine", "paper", "winter", "market", "silver", "forest",
    "harbor", "signal", "cotton", "valley", "bridge", "orbit", "copper", "island", "lantern", "meadow", "thunder",
];

fn phrase(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let docs: Vec<Document> = (0..100)
        .map(|i| {
            let body = phrase(&mut rng, 4, 25);
            Document {
                id: i + 1,
                title: phrase(&mut rng, 1, 2),
                first_paragraph: body.clone(),
                full_text: format!("{body} . {}", phrase(&mut rng, 0, 8)),
            }
        })
        .collect();
    let index = DocumentIndex::build(docs.clone()).map_err(err)?;
    let mut agree = 0;
    for q in 0..50 {
        let query = match q % 4 {
            0 => docs[rng.random_range(0..docs.len())].title.clone(),
            1 => format!("{} unheard", phrase(&mut rng, 1, 3)),
            _ => phrase(&mut rng, 1, 6),
        };
        let got = index.retrieve(&query, 1).map_err(err)?.first().copied();
        let want = oracles::retrieval::tfidf_top1(&docs, &query);
        agree += usize::from(match (got, want) {
            (None, None) => true,
            (Some((gi, gs)), Some((wi, ws))) => gi == wi && (gs - ws).abs() < 1e-9,
            _ => false,
        });
    }

    let entities = ["new york", "new york city", "york", "paris", "city", "ada lovelace", "lovelace", "music hall", "music"];
    let relations = ["located in", "near", "named after"];
    let triples: Vec<Triple> = (0..30)
        .map(|_| {
            Triple::new(
                entities[rng.random_range(0..entities.len())],
                relations[rng.random_range(0..relations.len())],
                entities[rng.random_range(0..entities.len())],
            )
        })
        .collect();
    let graph = KnowledgeGraph::new(triples.clone()).map_err(err)?;
    let fillers = ["tell me about", "what is", "and", "the", "?"];
    let mut kg_agree = 0;
    for _ in 0..30 {
        let utterance = (0..rng.random_range(1..5))
            .map(|_| {
                if rng.random_bool(0.5) {
                    fillers[rng.random_range(0..fillers.len())]
                } else {
                    entities[rng.random_range(0..entities.len())]
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        let got = match graph.neighbors(&utterance) {
            MetaKnowledge::Graph { triples } => triples,
            _ => Vec::new(),
        };
        kg_agree += usize::from(got == oracles::retrieval::kg_neighbors(&triples, &utterance));
    }
    Ok((agree == 50 && kg_agree == 30, format!("tfidf {agree}/50 queries, kg {kg_agree}/30 utterances")))
}

fn seq(rng: &mut ChaCha8Rng, max_len: usize, alphabet: u32) -> Vec<u32> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut worst = 0.0f64;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..200 {
        let alphabet = rng.random_range(2..8);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..rng.random_range(1..5))
            .map(|_| (seq(&mut rng, 12, alphabet), seq(&mut rng, 12, alphabet)))
            .collect();
        let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(c, r)| (&c[..], &r[..])).collect();
        for n in 1..=4 {
            track(metrics::corpus_bleu(&refs, n), oracles::metrics::bleu(&pairs, n));
        }
        track(metrics::corpus_avg_bleu(&refs), oracles::metrics::avg_bleu(&pairs));
        track(metrics::unigram_f1(&pairs[0].0, &pairs[0].1), oracles::metrics::unigram_f1(&pairs[0].0, &pairs[0].1));
        let ents: Vec<(Vec<u32>, Vec<Vec<u32>>)> = pairs
            .iter()
            .map(|(c, _)| {
                let gold = (0..rng.random_range(0..4))
                    .map(|_| (0..rng.random_range(1..4)).map(|_| rng.random_range(0..alphabet)).collect())
                    .collect();
                (c.clone(), gold)
            })
            .collect();
        let ent_refs: Vec<(&[u32], &[Vec<u32>])> = ents.iter().map(|(c, g)| (&c[..], &g[..])).collect();
        track(metrics::entity_f1(&ent_refs), oracles::metrics::entity_f1(&ents));
        let texts: Vec<Vec<u32>> = pairs.iter().map(|(c, _)| c.clone()).collect();
        let text_refs: Vec<&[u32]> = texts.iter().map(|t| &t[..]).collect();
        for n in 1..=3 {
            track(metrics::distinct_n(&text_refs, n), oracles::metrics::distinct_n(&texts, n));
        }
    }
    Ok((worst <= 1e-9, format!("200 cases, max abs diff {worst:.1e}")))
}

fn rerank_contract(engine: &Engine, suite: &Suite) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut agree = 0;
    let mut with_ties = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..10);
        // Coarse values so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 * 0.25 - 0.5).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let want = scores.iter().position(|&s| s == max);
        with_ties += usize::from(scores.iter().filter(|&&s| s == max).count() > 1);
        let cands: Vec<(String, Vec<u32>)> = (0..n).map(|i| (format!("c{i}"), vec![i as u32])).collect();
        let by_text: BTreeMap<String, f64> = cands.iter().map(|c| c.0.clone()).zip(scores.iter().copied()).collect();
        let scorer = move |t: &str| by_text[t];
        let chosen = rerank(cands, 0, &scorer).map_err(err)?.iter().position(|c| c.chosen);
        agree += usize::from(select_best(&scores) == want && chosen == want);
    }

    let weather = engine
        .skills()
        .into_iter()
        .find(|s| s.family == "table_grounded")
        .ok_or("no table-grounded skill")?;
    let ds = pipeline::dataset(suite, &weather.name).map_err(err)?;
    let mut grounded = 0;
    let cases: Vec<_> = ds.split(Split::Test).into_iter().filter(|e| !e.gold_entities.is_empty()).take(50).collect();
    for e in &cases {
        let r = engine.respond(&e.history, &e.meta, weather.skill_id, &DecodeParams::greedy()).map_err(err)?;
        let resp = format!(" {} ", metric_tokens(&r.utterance.text).join(" "));
        grounded += usize::from(
            e.gold_entities
                .iter()
                .all(|g| resp.contains(&format!(" {} ", metric_tokens(g).join(" ")))),
        );
    }
    let rate = grounded as f64 / cases.len().max(1) as f64;
    Ok((
        agree == 1000 && cases.len() == 50 && rate >= 0.9,
        format!("argmax {agree}/1000 ({with_ties} with ties); slot value in {grounded}/{} table replies", cases.len()),
    ))
}

fn round_trip(engine: &Engine, dir: &Path) -> Outcome {
    let art = ArtifactDir::new(dir);
    art.save_engine(engine).map_err(err)?;
    let back = art.load_engine().map_err(err)?;
    let mut same = back.tokenizer.vocab() == engine.tokenizer.vocab()
        && back.backbone().to_checkpoint().to_bytes() == engine.backbone().to_checkpoint().to_bytes()
        && back.adapters().len() == engine.adapters().len()
        && back.manager().map(|m| m.to_checkpoint().to_bytes()) == engine.manager().map(|m| m.to_checkpoint().to_bytes());
    for ((a, sa), (b, sb)) in engine.adapters().iter().zip(back.adapters().iter()) {
        same &= a == b && sa.to_checkpoint().to_bytes() == sb.to_checkpoint().to_bytes();
        let ids: Vec<u32> = (0..20).map(|i| (i * 7 % engine.tokenizer.len()) as u32).collect();
        let x = engine.backbone().forward(&ids, Some(sa)).map_err(err)?;
        let y = back.backbone().forward(&ids, Some(sb)).map_err(err)?;
        same &= bits(&x) == bits(&y);
    }
    Ok((same, format!("{} adapters + manager reloaded", back.adapters().len())))
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(config: &Path) -> Result<Self, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_adapterbot"))
            .args(["--config"])
            .arg(config)
            .args(["serve", "--listen", "127.0.0.1:0"])
            .env_remove("ADAPTERBOT_SEED")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(err)?;
        let mut lines = BufReader::new(child.stdout.take().expect("piped")).lines();
        let base = lines
            .find_map(|l| l.ok()?.strip_prefix("listening on ").map(str::to_string))
            .ok_or("server never reported its address")?;
        let client = reqwest::blocking::Client::new();
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let h: Value = client.get(format!("{base}/api/health")).send().map_err(err)?.json().map_err(err)?;
            if h["status"] == "ready" {
                break;
            }
            if Instant::now() > deadline {
                return Err("engine never loaded".into());
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        Ok(Self { child, base })
    }

    fn conversation(&self, utterances: &[String]) -> Result<Vec<Value>, String> {
        let client = reqwest::blocking::Client::new();
        let mut session = Value::Null;
        let mut out = Vec::new();
        for text in utterances {
            let mut r: Value = client
                .post(format!("{}/api/chat", self.base))
                .json(&json!({"session_id": session, "text": text, "mode": "auto"}))
                .send()
                .map_err(err)?
                .json()
                .map_err(err)?;
            if r.get("error").is_some() {
                return Err(r.to_string());
            }
            session = r["session_id"].take();
            out.push(r);
        }
        Ok(out)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn service_replay(dir: &Path, suite: &Suite) -> Outcome {
    let config = dir.join("serve.toml");
    let text = format!("[service]\nartifacts = {:?}\n", dir.join("artifacts"));
    std::fs::write(&config, text).map_err(err)?;
    let utterances: Vec<String> = (0..10)
        .map(|i| {
            let ds = &suite.datasets[i % suite.datasets.len()];
            let e = &ds.split(Split::Test)[i];
            e.history.last_user().map(|u| u.text.clone()).unwrap_or_else(|| "hello".into())
        })
        .collect();
    let first = Server::start(&config)?.conversation(&utterances)?;
    let second = Server::start(&config)?.conversation(&utterances)?;
    let differing = first.iter().zip(&second).filter(|(a, b)| a["text"] != b["text"] || a["skill_id"] != b["skill_id"]).count();
    let skills: std::collections::BTreeSet<_> = first.iter().map(|r| r["skill_id"].to_string()).collect();
    Ok((
        differing == 0 && first.len() == 10 && second.len() == 10,
        format!("{differing} of 10 turns differ across restarts ({} skills routed)", skills.len()),
    ))
}

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };
    let total = Instant::now();

    let t = Instant::now();
    report.record(1, "adapter parameter count", t, param_count());

    let (spec, res) = SuiteSpec::reference();
    let suite = synth_suite(&spec, &res).expect("reference suite");
    let seed = suite.spec.seed;
    let cfg = PipelineConfig::default();
    let tmp = tempfile::tempdir().unwrap();
    let base_dir = ArtifactDir::new(tmp.path().join("base"));

    let t = Instant::now();
    let (tok, bb, log) = pipeline::pretrain(&suite, &cfg, seed).expect("pretraining");
    println!("    pretrained backbone: vocab {}, valid ppl {:.4} ({:.0}s)", tok.len(), log.best, t.elapsed().as_secs_f64());
    base_dir.save_base(&tok, &bb).unwrap();
    let backbone_hash = bb.content_hash();
    let mut engine = Engine::new(tok, bb).unwrap();

    let t = Instant::now();
    report.record(2, "identity at init", t, identity_at_init(&engine));

    let defaults: Vec<String> = suite.spec.default_skills().iter().map(|s| s.name.clone()).collect();
    let order: Vec<String> = suite.spec.registration_order().iter().map(|s| s.name.clone()).collect();
    let max_len = engine.backbone().config().max_seq_len;
    let plans = pipeline::skill_plans(&suite, &engine.tokenizer, max_len, &order, seed).unwrap();
    let n_default = defaults.len();

    // Default skills, then a routing snapshot, then the continual ones.
    let t_train = Instant::now();
    let first = train_sequentially(&mut engine, &plans[..n_default], &cfg, true);
    let t = Instant::now();
    let routed = match &first {
        Ok(_) => routing(&engine, &suite, &cfg, seed),
        Err(e) => Err(e.clone()),
    };
    let routed = match routed {
        Ok((outcome, e)) => {
            let within = t.elapsed() < Duration::from_secs(300);
            report.record(6, "routing accuracy", t, outcome.map(|(ok, d)| (ok && within, d)));
            Some(e)
        }
        Err(e) => {
            report.record(6, "routing accuracy", t, Err(e));
            None
        }
    };
    let t_cont = Instant::now();
    let first = first.and_then(|mut a| {
        let b = train_sequentially(&mut engine, &plans[n_default..], &cfg, true)?;
        a.logs.extend(b.logs);
        a.hashes.extend(b.hashes);
        a.isolation_breaks.extend(b.isolation_breaks);
        Ok(a)
    });
    let trained_s = t_train.elapsed() - (t_cont - t);

    let t = Instant::now();
    let now = engine.backbone().content_hash();
    report.record(3, "frozen backbone", t, first.as_ref().map_err(Clone::clone).and_then(|f| frozen_backbone(f, &backbone_hash, &now)));
    report.record(5, "adapters learn", t, first.as_ref().map_err(Clone::clone).and_then(|f| adapters_learn(f, &defaults)));

    let t = Instant::now();
    let mut reversed_plans = plans.clone();
    reversed_plans.reverse();
    let permuted = base_dir.load_base().map_err(err).and_then(|mut e| train_sequentially(&mut e, &reversed_plans, &cfg, false));
    let isolation_outcome = match (&first, &permuted) {
        (Ok(a), Ok(b)) => isolation(a, b).map(|(ok, d)| {
            let cpu_min = (trained_s + t.elapsed()).as_secs_f64() / 60.0;
            (ok && cpu_min < 30.0, format!("{d}; {cpu_min:.1} min of training"))
        }),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report.record(4, "skill isolation", t_train, isolation_outcome);

    let t = Instant::now();
    report.record(7, "gradient check", t, gradients().map(|(ok, d)| (ok && t.elapsed() < Duration::from_secs(60), d)));
    let t = Instant::now();
    report.record(8, "retrieval oracles", t, retrieval());
    let t = Instant::now();
    report.record(9, "metric oracles", t, metric_oracles());

    let t = Instant::now();
    let served = routed.ok_or_else(|| "no trained engine".to_string());
    report.record(10, "rerank contract and grounding", t, served.clone().and_then(|e| rerank_contract(&e, &suite)));

    let t = Instant::now();
    let persisted = served.and_then(|e| {
        let (ok, d) = round_trip(&e, &tmp.path().join("artifacts"))?;
        let (ok2, d2) = service_replay(tmp.path(), &suite)?;
        Ok((ok && ok2, format!("{d}; {d2}")))
    });
    report.record(11, "determinism and persistence", t, persisted);

    report.lines.sort_by_key(|l| l.0);
    println!("\nsummary ({:.1} min):", total.elapsed().as_secs_f64() / 60.0);
    for (n, name, ok, _, took) in &report.lines {
        println!("  {} [{n:>2}] {name} ({:.1}s)", if *ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
    }
    let failed: Vec<_> = report.lines.iter().filter(|l| !l.2).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
