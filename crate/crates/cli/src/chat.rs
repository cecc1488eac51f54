use std::io::{BufRead, Write};
use std::path::PathBuf;

use adapterbot::dialogue::MetaKnowledge;
use adapterbot_service::{load_filter, replay, take_turn, ChatRequest, ChatResponse, Mode, Session};

use crate::commands::{artifacts, header, load_engine};
use crate::{CliConfig, Failure};

pub struct ChatOptions {
    pub mode: Option<Mode>,
    pub skill: Option<u32>,
    pub style: Option<u32>,
    pub replay: Option<PathBuf>,
    pub save: Option<PathBuf>,
}

/// Short description of what the reply was grounded on.
fn summary(k: &MetaKnowledge) -> String {
    let lin = k.linearize().unwrap_or_default();
    if lin.is_empty() {
        "none".into()
    } else if lin.chars().count() > 60 {
        format!("{}...", lin.chars().take(57).collect::<String>())
    } else {
        lin
    }
}

fn show(r: &ChatResponse) {
    println!("bot> {}", r.text);
    let conf = r.confidence.map_or("manual".to_string(), |p| format!("{p:.2}"));
    let filtered = if r.filtered { ", filtered" } else { "" };
    println!("     [skill {}, confidence {conf}, knowledge: {}{filtered}]", r.skill_id, summary(&r.knowledge));
}

pub fn run(cfg: &mut CliConfig, opts: &ChatOptions) -> Result<(), Failure> {
    if let Some(s) = cfg.seed {
        cfg.service.decode.seed = s;
    }
    cfg.service.validate()?;
    let engine = load_engine(cfg)?;
    header("chat", cfg, cfg.service.decode.seed);
    let resources = cfg.service.resources()?;
    let filter = load_filter(&cfg.service)?;

    if let Some(path) = &opts.replay {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read transcript {}: {e}", path.display())))?;
        let transcript: Session = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("transcript {}: {e}", path.display())))?;
        let turns = replay(&engine, &resources, &cfg.service, filter.as_ref(), &transcript)?;
        let mut diverged = 0;
        for (i, t) in turns.iter().enumerate() {
            let ok = t.recorded == t.replayed;
            diverged += usize::from(!ok);
            println!("[{}] {} you> {}", i + 1, if ok { "same" } else { "DIFF" }, t.user);
            println!("         bot> {}", t.replayed);
            if !ok {
                println!("    recorded> {}", t.recorded);
            }
        }
        return if diverged == 0 {
            println!("replay identical: {} exchanges", turns.len());
            Ok(())
        } else {
            Err(Failure::runtime(format!("replay diverged on {diverged} of {} exchanges", turns.len())))
        };
    }

    let mut mode = opts.mode.unwrap_or(if opts.skill.is_some() || engine.manager().is_none() {
        Mode::Manual
    } else {
        Mode::Auto
    });
    let mut skill = opts.skill.or_else(|| engine.adapters().ids().next().map(|t| t.0));
    let mut style = opts.style;
    let mut session = Session::new();
    println!(
        "{} skills loaded from {}; commands: /skill N, /auto, /style N, /style off, /quit",
        engine.adapters().len(),
        artifacts(cfg).0.display()
    );
    let stdin = std::io::stdin();
    let mut line = String::new();
    loop {
        print!("you> ");
        std::io::stdout().flush()?;
        line.clear();
        if stdin.lock().read_line(&mut line)? == 0 {
            println!();
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(cmd) = text.strip_prefix('/') {
            let mut parts = cmd.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("quit"), _) => break,
                (Some("auto"), _) => {
                    mode = Mode::Auto;
                    println!("routing with the dialogue manager");
                }
                (Some("skill"), Some(n)) => match n.parse() {
                    Ok(n) => {
                        mode = Mode::Manual;
                        skill = Some(n);
                        println!("using skill {n}");
                    }
                    Err(_) => println!("usage: /skill N"),
                },
                (Some("style"), Some("off")) => {
                    style = None;
                    println!("style re-ranking off");
                }
                (Some("style"), Some(n)) => match n.parse() {
                    Ok(n) => {
                        style = Some(n);
                        println!("re-ranking for style {n}");
                    }
                    Err(_) => println!("usage: /style N"),
                },
                _ => println!("commands: /skill N, /auto, /style N, /style off, /quit"),
            }
            continue;
        }
        let req = ChatRequest {
            session_id: None,
            text: text.to_string(),
            mode,
            skill_id: if mode == Mode::Manual { skill } else { None },
            style_id: style,
        };
        match take_turn(&engine, &resources, &cfg.service, filter.as_ref(), &mut session, &req) {
            Ok(r) => show(&r),
            Err(e) => println!("error: {e}"),
        }
    }
    if let Some(path) = &opts.save {
        std::fs::write(path, serde_json::to_string_pretty(&session).expect("session serializes"))?;
        println!("saved transcript to {}", path.display());
    }
    Ok(())
}
