//! `adapterbot`: corpus synthesis, training, evaluation, terminal chat and
//! the HTTP service, all driven by one resolved configuration.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod chat;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use adapterbot::backbone::DecodeMode;
use adapterbot::corpus::Split;
use adapterbot_service::{Mode, ServiceError};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::CliConfig;

#[derive(Debug, Parser)]
#[command(name = "adapterbot", version, about = "Skill adapters over a frozen dialogue backbone")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, env = "ADAPTERBOT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "ADAPTERBOT_SEED")]
    seed: Option<u64>,
    /// Corpus directory written by `synth-corpus`.
    #[arg(long, global = true, env = "ADAPTERBOT_CORPUS")]
    corpus: Option<PathBuf>,
    /// Artifact directory holding checkpoints.
    #[arg(long, global = true, env = "ADAPTERBOT_ARTIFACTS")]
    artifacts: Option<PathBuf>,
    /// Output location: the corpus directory for `synth-corpus`, the
    /// artifact directory for training commands, the report for `eval`.
    #[arg(long, global = true, env = "ADAPTERBOT_OUT")]
    out: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-skill corpus.
    SynthCorpus {
        /// Suite spec (TOML); the bundled reference suite if omitted.
        #[arg(long, env = "ADAPTERBOT_SUITE")]
        suite: Option<PathBuf>,
    },
    /// Train the backbone on the pooled corpus and freeze it.
    Pretrain(TrainArgs),
    /// Train and register adapters for skills not yet registered.
    TrainAdapter {
        #[command(flatten)]
        train: TrainArgs,
        /// Skill name (repeatable); every unregistered skill if omitted.
        #[arg(long = "skill", env = "ADAPTERBOT_SKILL", value_delimiter = ',')]
        skills: Vec<String>,
    },
    /// Train the dialogue manager over the registered skills.
    TrainManager(TrainArgs),
    /// Train a style classifier for every registered style skill.
    TrainStyle,
    /// Score every registered skill and write a report.
    Eval {
        /// Comma-separated: bleu, ppl, f1, entity_f1, dist.
        #[arg(long, env = "ADAPTERBOT_METRICS")]
        metrics: Option<String>,
        #[arg(long, env = "ADAPTERBOT_SPLIT")]
        split: Option<SplitArg>,
        /// `auto` routes each turn through the dialogue manager.
        #[arg(long, env = "ADAPTERBOT_MODE")]
        mode: Option<ModeArg>,
        /// Turns per skill (0 = all).
        #[arg(long, env = "ADAPTERBOT_MAX_EXAMPLES")]
        max_examples: Option<usize>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Terminal chat. Commands: /skill N, /auto, /style N, /style off, /quit.
    Chat {
        #[arg(long, env = "ADAPTERBOT_MODE")]
        mode: Option<ModeArg>,
        #[arg(long, env = "ADAPTERBOT_SKILL")]
        skill: Option<u32>,
        #[arg(long, env = "ADAPTERBOT_STYLE")]
        style: Option<u32>,
        /// Replay a saved transcript and report any divergence.
        #[arg(long, env = "ADAPTERBOT_REPLAY")]
        replay: Option<PathBuf>,
        /// Write the session transcript here on exit.
        #[arg(long, env = "ADAPTERBOT_SAVE")]
        save: Option<PathBuf>,
        #[command(flatten)]
        service: ServiceArgs,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Run the HTTP chat service.
    Serve {
        #[arg(long, env = "ADAPTERBOT_LISTEN")]
        listen: Option<String>,
        #[command(flatten)]
        service: ServiceArgs,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, env = "ADAPTERBOT_LR")]
    lr: Option<f32>,
    #[arg(long, env = "ADAPTERBOT_BATCH")]
    batch: Option<usize>,
    #[arg(long, env = "ADAPTERBOT_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "ADAPTERBOT_PATIENCE")]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct ServiceArgs {
    #[arg(long, env = "ADAPTERBOT_FIXTURE")]
    fixture: Option<PathBuf>,
    #[arg(long, env = "ADAPTERBOT_GRAPH")]
    graph: Option<PathBuf>,
    #[arg(long, env = "ADAPTERBOT_DOCS")]
    docs: Option<PathBuf>,
    #[arg(long, env = "ADAPTERBOT_BLOCKLIST")]
    blocklist: Option<PathBuf>,
    #[arg(long, env = "ADAPTERBOT_PERSONA")]
    persona: Option<String>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long, env = "ADAPTERBOT_DECODE")]
    decode: Option<DecodeArg>,
    #[arg(long, env = "ADAPTERBOT_TOP_K")]
    top_k: Option<usize>,
    #[arg(long, env = "ADAPTERBOT_TEMPERATURE")]
    temperature: Option<f32>,
    #[arg(long, env = "ADAPTERBOT_MAX_NEW_TOKENS")]
    max_new_tokens: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Manual,
    Auto,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Manual => Mode::Manual,
            ModeArg::Auto => Mode::Auto,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecodeArg {
    Greedy,
    TopK,
}

/// A failed run: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<adapterbot::Error> for Failure {
    fn from(e: adapterbot::Error) -> Self {
        use adapterbot::Error as E;
        match e {
            E::Config(_) | E::Spec(_) | E::Parse { .. } | E::Routing(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Engine(e) => e.into(),
            ServiceError::Config(_) | ServiceError::BadRequest(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

fn apply_train(t: &mut adapterbot::trainer::TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
}

fn apply_service(c: &mut CliConfig, a: &ServiceArgs) {
    let s = &mut c.service;
    if a.fixture.is_some() {
        s.fixture = a.fixture.clone();
    }
    if a.graph.is_some() {
        s.graph = a.graph.clone();
    }
    if a.docs.is_some() {
        s.docs = a.docs.clone();
    }
    if a.blocklist.is_some() {
        s.blocklist = a.blocklist.clone();
    }
    if a.persona.is_some() {
        s.persona = a.persona.clone();
    }
}

fn apply_decode(c: &mut CliConfig, a: &DecodeArgs) {
    let d = &mut c.service.decode;
    if let Some(m) = a.decode {
        d.mode = match m {
            DecodeArg::Greedy => DecodeMode::Greedy,
            DecodeArg::TopK => DecodeMode::TopK,
        };
    }
    if let Some(v) = a.top_k {
        d.k = v;
    }
    if let Some(v) = a.temperature {
        d.temperature = v;
    }
    if let Some(v) = a.max_new_tokens {
        d.max_new_tokens = v;
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(p) = &cli.corpus {
        cfg.corpus.dir = p.clone();
    }
    if let Some(p) = &cli.artifacts {
        cfg.service.artifacts = p.clone();
    }
    let out = cli.out.clone();
    match &cli.command {
        Command::SynthCorpus { suite } => {
            if suite.is_some() {
                cfg.corpus.suite = suite.clone();
            }
            if let Some(o) = out {
                cfg.corpus.dir = o;
            }
            commands::synth_corpus(&cfg)
        }
        Command::Pretrain(t) => {
            apply_train(&mut cfg.pipeline.pretrain, t);
            if let Some(o) = out {
                cfg.service.artifacts = o;
            }
            commands::pretrain(&cfg)
        }
        Command::TrainAdapter { train, skills } => {
            apply_train(&mut cfg.pipeline.adapter, train);
            if let Some(o) = out {
                cfg.service.artifacts = o;
            }
            commands::train_adapter(&cfg, skills)
        }
        Command::TrainManager(t) => {
            apply_train(&mut cfg.pipeline.manager, t);
            if let Some(o) = out {
                cfg.service.artifacts = o;
            }
            commands::train_manager(&cfg)
        }
        Command::TrainStyle => {
            if let Some(o) = out {
                cfg.service.artifacts = o;
            }
            commands::train_style(&cfg)
        }
        Command::Eval {
            metrics,
            split,
            mode,
            max_examples,
            decode,
        } => {
            if let Some(m) = metrics {
                cfg.eval.metrics = m.clone();
            }
            if let Some(s) = split {
                cfg.eval.split = match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Valid => Split::Valid,
                    SplitArg::Test => Split::Test,
                };
            }
            if let Some(m) = mode {
                cfg.eval.routed = matches!(m, ModeArg::Auto);
            }
            if let Some(n) = max_examples {
                cfg.eval.max_examples = *n;
            }
            if out.is_some() {
                cfg.eval.out = out;
            }
            apply_decode(&mut cfg, decode);
            commands::eval(&cfg)
        }
        Command::Chat {
            mode,
            skill,
            style,
            replay,
            save,
            service,
            decode,
        } => {
            apply_service(&mut cfg, service);
            apply_decode(&mut cfg, decode);
            let opts = chat::ChatOptions {
                mode: mode.map(Mode::from),
                skill: *skill,
                style: *style,
                replay: replay.clone(),
                save: save.clone(),
            };
            chat::run(&mut cfg, &opts)
        }
        Command::Serve {
            listen,
            service,
            decode,
        } => {
            if let Some(l) = listen {
                cfg.service.listen = l.clone();
            }
            apply_service(&mut cfg, service);
            apply_decode(&mut cfg, decode);
            commands::serve(&mut cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ADAPTERBOT_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
