use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use adapterbot::corpus::{synth_suite, Suite, SuiteSpec};
use adapterbot::engine::Engine;
use adapterbot::manager::HistoryMode;
use adapterbot::metrics::Metric;
use adapterbot::pipeline::{self, ArtifactDir, CorpusDir, EvalOptions};
use adapterbot::reranker::StyleTrainConfig;
use adapterbot::trainer;

use crate::{CliConfig, Failure};

/// Reproducibility header: the fully resolved configuration and seed.
pub fn header(command: &str, cfg: &CliConfig, seed: u64) {
    let mut shown = cfg.clone();
    shown.seed = Some(seed);
    eprintln!("# adapterbot {command}\n# resolved configuration:");
    for line in shown.to_toml().lines() {
        eprintln!("#   {line}");
    }
    eprintln!("# seed = {seed}");
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::usage(format!("missing {what}: {}", path.display())))
    }
}

pub fn load_suite(cfg: &CliConfig) -> Result<Suite, Failure> {
    let dir = CorpusDir::new(&cfg.corpus.dir);
    require(&dir.spec(), "corpus")?;
    require(&dir.corpus(), "corpus")?;
    Ok(dir.load()?)
}

pub fn artifacts(cfg: &CliConfig) -> ArtifactDir {
    ArtifactDir::new(cfg.artifacts())
}

/// Tokenizer, backbone and everything trained so far.
pub fn load_engine(cfg: &CliConfig) -> Result<Engine, Failure> {
    let dir = artifacts(cfg);
    require(&dir.tokenizer(), "checkpoint")?;
    require(&dir.backbone(), "checkpoint")?;
    Ok(dir.load_engine()?)
}

pub fn synth_corpus(cfg: &CliConfig) -> Result<(), Failure> {
    let (mut spec, res, source) = match &cfg.corpus.suite {
        Some(p) => {
            require(p, "suite spec")?;
            let (s, r) = SuiteSpec::load(p)?;
            (s, r, Some(p.parent().unwrap_or(Path::new(".")).to_path_buf()))
        }
        None => {
            let (s, r) = SuiteSpec::reference();
            (s, r, None)
        }
    };
    spec.seed = cfg.seed.unwrap_or(spec.seed);
    header("synth-corpus", cfg, spec.seed);
    let suite = synth_suite(&spec, &res)?;
    let dir = CorpusDir::new(&cfg.corpus.dir);
    dir.save(&suite, source.as_deref())?;
    for d in &suite.datasets {
        println!("{:<12} {:>4} dialogues {:>5} turns", d.skill, d.n_dialogues(), d.examples.len());
    }
    println!("wrote {}", dir.corpus().display());
    Ok(())
}

pub fn pretrain(cfg: &CliConfig) -> Result<(), Failure> {
    let suite = load_suite(cfg)?;
    let seed = cfg.seed.unwrap_or(suite.spec.seed);
    header("pretrain", cfg, seed);
    cfg.pipeline.pretrain.validate()?;
    let dir = artifacts(cfg);
    if !dir.adapter_files()?.is_empty() {
        return Err(Failure::usage(format!(
            "{} already holds adapters trained on another backbone; choose a fresh --out",
            dir.0.display()
        )));
    }
    let (tok, bb, log) = pipeline::pretrain(&suite, &cfg.pipeline, seed)?;
    dir.save_base(&tok, &bb)?;
    dir.save_log("pretrain", &log)?;
    println!(
        "vocabulary {} | {} steps | valid ppl {:.4} | backbone {}",
        tok.len(),
        log.stop_step,
        log.best,
        bb.content_hash()
    );
    Ok(())
}

pub fn train_adapter(cfg: &CliConfig, skills: &[String]) -> Result<(), Failure> {
    let suite = load_suite(cfg)?;
    let seed = cfg.seed.unwrap_or(suite.spec.seed);
    let mut engine = load_engine(cfg)?;
    header("train-adapter", cfg, seed);
    cfg.pipeline.adapter.validate()?;
    let registered: BTreeSet<String> = engine.adapters().iter().map(|(_, s)| s.meta.name.clone()).collect();
    let names: Vec<String> = if skills.is_empty() {
        suite
            .spec
            .registration_order()
            .into_iter()
            .map(|s| s.name.clone())
            .filter(|n| !registered.contains(n))
            .collect()
    } else {
        if let Some(dup) = skills.iter().find(|s| registered.contains(*s)) {
            return Err(Failure::usage(format!("skill {dup:?} is already registered")));
        }
        skills.to_vec()
    };
    if names.is_empty() {
        println!("every skill in the suite is already registered");
        return Ok(());
    }
    let plans = pipeline::skill_plans(&suite, &engine.tokenizer, engine.backbone().config().max_seq_len, &names, seed)?;
    let dir = artifacts(cfg);
    let mut save_err = None;
    trainer::train_all(
        &mut engine,
        &plans,
        cfg.pipeline.bottleneck,
        |p| cfg.pipeline.adapter_config(p.family, p.seed),
        |id, stack, log| {
            let saved = dir
                .save_adapter(id, stack)
                .and_then(|_| dir.save_log(&format!("adapter-{:03}-{}", id.0, stack.meta.name), log));
            if let Err(e) = saved {
                save_err.get_or_insert(e);
            }
            println!(
                "skill {:>2} {:<12} epochs {:>3} | valid ppl {:.4} (backbone {:.4}, ratio {:.3})",
                id.0,
                stack.meta.name,
                log.epochs,
                log.best,
                log.initial,
                log.best / log.initial
            );
            let _ = std::io::stdout().flush();
        },
    )?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    if let Some(m) = engine.manager() {
        if m.labels().len() != engine.adapters().len() {
            eprintln!("note: the dialogue manager covers {} of {} skills; rerun train-manager", m.labels().len(), engine.adapters().len());
        }
    }
    Ok(())
}

pub fn train_manager(cfg: &CliConfig) -> Result<(), Failure> {
    let suite = load_suite(cfg)?;
    let seed = cfg.seed.unwrap_or(suite.spec.seed);
    let mut engine = load_engine(cfg)?;
    header("train-manager", cfg, seed);
    cfg.pipeline.manager.validate()?;
    if engine.adapters().is_empty() {
        return Err(Failure::usage("no adapters are registered; run train-adapter first"));
    }
    let (m, log) = pipeline::train_manager(&engine, &suite, &cfg.pipeline, seed)?;
    engine.set_manager(m)?;
    let dir = artifacts(cfg);
    dir.save_manager(engine.manager().expect("just set"))?;
    dir.save_log("manager", &log)?;
    for mode in [HistoryMode::SingleTurn, HistoryMode::MultiTurn] {
        let set = pipeline::routing_test_set(&engine, &suite, mode);
        for acc in trainer::routing_accuracy(engine.manager().expect("set"), &engine.tokenizer, &set)? {
            println!("routing {:?}: {:.4} over {} test turns", acc.mode, acc.accuracy, acc.n);
        }
    }
    Ok(())
}

pub fn train_style(cfg: &CliConfig) -> Result<(), Failure> {
    let suite = load_suite(cfg)?;
    let seed = cfg.seed.unwrap_or(suite.spec.seed);
    let engine = load_engine(cfg)?;
    header("train-style", cfg, seed);
    let sc = StyleTrainConfig {
        seed,
        ..cfg.pipeline.style.clone()
    };
    let styles = pipeline::train_styles(&engine, &suite, &sc)?;
    if styles.is_empty() {
        return Err(Failure::runtime("no style-family skills are registered"));
    }
    let dir = artifacts(cfg);
    for (c, r) in &styles {
        dir.save_style(c)?;
        println!(
            "style {:>2} | train acc {:.3} | held-out acc {:.3}{}",
            r.style_id,
            r.train_accuracy,
            r.heldout_accuracy,
            if r.degenerate { " | degenerate: positives also occur as negatives" } else { "" }
        );
    }
    Ok(())
}

pub fn eval(cfg: &CliConfig) -> Result<(), Failure> {
    let metrics = Metric::parse_list(&cfg.eval.metrics)?;
    let suite = load_suite(cfg)?;
    let engine = load_engine(cfg)?;
    let seed = cfg.seed.unwrap_or(cfg.service.decode.seed);
    header("eval", cfg, seed);
    if cfg.eval.routed && engine.manager().is_none() {
        return Err(Failure::usage("--mode auto needs a trained dialogue manager"));
    }
    let opts = EvalOptions {
        metrics,
        split: cfg.eval.split,
        routed: cfg.eval.routed,
        decode: adapterbot::backbone::DecodeParams {
            seed,
            ..cfg.service.decode.clone()
        },
        max_examples: cfg.eval.max_examples,
    };
    opts.decode.validate()?;
    let report = pipeline::evaluate(&engine, &suite, &opts)?;
    let out = cfg.eval.out.clone().unwrap_or_else(|| cfg.artifacts().join("eval.jsonl"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    report.save(&out)?;
    print!("{}", report.table());
    println!("wrote {}", out.display());
    Ok(())
}

pub fn serve(cfg: &mut CliConfig) -> Result<(), Failure> {
    if let Some(s) = cfg.seed {
        cfg.service.decode.seed = s;
    }
    header("serve", cfg, cfg.service.decode.seed);
    require(&artifacts(cfg).backbone(), "checkpoint")?;
    let rt = tokio::runtime::Runtime::new()?;
    let service = cfg.service.clone();
    rt.block_on(adapterbot_service::run(service, |addr| {
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    }))?;
    Ok(())
}
