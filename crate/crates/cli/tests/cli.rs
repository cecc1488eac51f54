use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use adapterbot::metrics::EvalReport;
use serde_json::{json, Value};

const QUICK: &str = r#"
[pipeline.pretrain]
max_epochs = 1

[pipeline.adapter]
max_epochs = 2

[pipeline.adapter_families.table_grounded]
max_epochs = 2

[pipeline.manager]
max_epochs = 4

[service.decode]
max_new_tokens = 12
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adapterbot"));
    for (k, _) in std::env::vars() {
        if k.starts_with("ADAPTERBOT_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Corpus plus a quickly trained model with three skills, a manager and
/// style classifiers; shared by the tests below.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        std::fs::write(dir.join("quick.toml"), QUICK).unwrap();
        let c = ["--config", "quick.toml"];
        ok(&dir, &[&c[..], &["synth-corpus"]].concat());
        ok(&dir, &[&c[..], &["pretrain"]].concat());
        ok(&dir, &[&c[..], &["train-adapter", "--skill", "positive,weather,negative"]].concat());
        ok(&dir, &[&c[..], &["train-manager"]].concat());
        ok(&dir, &[&c[..], &["train-style"]].concat());
        dir
    })
}

#[test]
fn synth_corpus_is_deterministic_and_prints_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(tmp.path(), &["synth-corpus", "--out", "a"]);
    assert!(a.status.success());
    let err = String::from_utf8_lossy(&a.stderr);
    assert!(err.contains("# seed = "), "{err}");
    assert!(err.contains("[pipeline"), "{err}");
    ok(tmp.path(), &["synth-corpus", "--out", "b"]);
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("corpus.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    ok(tmp.path(), &["synth-corpus", "--out", "c", "--seed", "11"]);
    assert_ne!(read("a"), read("c"));
}

#[test]
fn flags_beat_config_beats_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "seed = 5\n").unwrap();
    let seed_of = |out: Output| {
        let err = String::from_utf8(out.stderr).unwrap();
        err.lines().find_map(|l| l.strip_prefix("# seed = ").map(str::to_string)).unwrap()
    };
    let dflt = seed_of(run(tmp.path(), &["synth-corpus"]));
    assert_eq!(dflt, "2021");
    assert_eq!(seed_of(run(tmp.path(), &["--config", "c.toml", "synth-corpus"])), "5");
    assert_eq!(seed_of(run(tmp.path(), &["--config", "c.toml", "synth-corpus", "--seed", "7"])), "7");
    let env = bin()
        .current_dir(tmp.path())
        .env("ADAPTERBOT_SEED", "8")
        .args(["--config", "c.toml", "synth-corpus"])
        .output()
        .unwrap();
    assert_eq!(seed_of(env), "8");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["eval", "--artifacts", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(tmp.path(), &["synth-corpus"]);
    assert!(out.status.success());
    let out = run(tmp.path(), &["eval", "--artifacts", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/tokenizer.json"), "{err}");
    assert_eq!(run(tmp.path(), &["eval", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    std::fs::write(tmp.path().join("bad.toml"), "bogus = 1\n").unwrap();
    assert_eq!(run(tmp.path(), &["--config", "bad.toml", "synth-corpus"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["--config", "missing.toml", "synth-corpus"]).status.code(), Some(2));
    let out = run(tmp.path(), &["serve", "--artifacts", "nowhere", "--listen", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/backbone.ckpt"));
}

#[test]
fn unknown_metric_exits_2() {
    let dir = trained();
    let out = run(dir, &["--config", "quick.toml", "eval", "--metrics", "bleu,rouge", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rouge"));
}

#[test]
fn eval_reports_are_reproducible_and_match_training() {
    let dir = trained();
    let args = |out: &'static str| {
        vec!["--config", "quick.toml", "eval", "--split", "valid", "--max-examples", "0", "--out", out]
    };
    let table = ok(dir, &args("r1.jsonl"));
    ok(dir, &args("r2.jsonl"));
    let r1 = std::fs::read(dir.join("r1.jsonl")).unwrap();
    assert_eq!(r1, std::fs::read(dir.join("r2.jsonl")).unwrap());
    for col in ["avg_bleu", "ppl", "f1", "dist1"] {
        assert!(table.contains(col), "{table}");
    }
    let report = EvalReport::load(dir.join("r1.jsonl")).unwrap();
    assert_eq!(report.skills.len(), 3);
    for s in &report.skills {
        let log = std::fs::read_to_string(dir.join(format!("artifacts/logs/adapter-{:03}-{}.jsonl", s.skill_id, s.skill))).unwrap();
        let summary: Value = log
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .find(|v| v["record"] == "summary")
            .unwrap();
        let trained = summary["best"].as_f64().unwrap();
        assert!((s.metrics["ppl"] - trained).abs() < 1e-4, "{} {} vs {trained}", s.skill, s.metrics["ppl"]);
    }
}

#[test]
fn routed_eval_adds_routing_accuracy() {
    let dir = trained();
    let out = ok(dir, &["--config", "quick.toml", "eval", "--mode", "auto", "--max-examples", "5", "--metrics", "f1", "--out", "routed.jsonl"]);
    assert!(out.contains("routing_acc"), "{out}");
}

fn chat(dir: &Path, args: &[&str], input: &str) -> Output {
    let mut child = bin()
        .current_dir(dir)
        .args(["--config", "quick.toml", "chat"])
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn chat_commands_and_replay() {
    let dir = trained();
    let out = chat(
        dir,
        &["--save", "t.json"],
        "/skill 2\nwhat is the weather in paris ?\n/auto\nhello there\n/skill 1\n/style 1\nhow was the party ?\n",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let tags: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with("[skill")).collect();
    assert_eq!(tags.len(), 3, "{text}");
    assert!(tags[0].contains("[skill 2, confidence manual"), "{text}");
    assert!(!tags[1].contains("manual"), "{text}");
    assert!(tags[2].contains("[skill 1, confidence manual"), "{text}");

    let t: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("t.json")).unwrap()).unwrap();
    assert_eq!(t["turns"].as_array().unwrap().len(), 6);
    assert_eq!(t["turns"][1]["knowledge"]["variant"], "table");

    let replayed = chat(dir, &["--replay", "t.json"], "");
    assert!(replayed.status.success(), "{}", String::from_utf8_lossy(&replayed.stdout));
    assert!(String::from_utf8_lossy(&replayed.stdout).contains("replay identical: 3 exchanges"));

    let mut tampered = t.clone();
    tampered["turns"][3]["text"] = json!("something else entirely");
    std::fs::write(dir.join("bad.json"), tampered.to_string()).unwrap();
    assert_eq!(chat(dir, &["--replay", "bad.json"], "").status.code(), Some(1));
}

#[test]
fn chat_exits_cleanly_on_eof() {
    let out = chat(trained(), &["--skill", "1"], "");
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn serve_answers_http() {
    let dir = trained();
    let mut child = bin()
        .current_dir(dir)
        .args(["--config", "quick.toml", "serve", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let base = lines
        .find_map(|l| l.unwrap().strip_prefix("listening on ").map(str::to_string))
        .unwrap();
    let client = reqwest::blocking::Client::new();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(30);
    loop {
        let h: Value = client.get(format!("{base}/api/health")).send().unwrap().json().unwrap();
        if h["status"] == "ready" {
            break;
        }
        assert!(std::time::Instant::now() < deadline, "engine never loaded");
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    let skills: Value = client.get(format!("{base}/api/skills")).send().unwrap().json().unwrap();
    assert_eq!(skills.as_array().unwrap().len(), 3);
    let r: Value = client
        .post(format!("{base}/api/chat"))
        .json(&json!({"text": "what is the weather in tokyo ?", "mode": "manual", "skill_id": 2}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(r["skill_id"], 2);
    child.kill().unwrap();
    child.wait().unwrap();
}
