//! Automatic response metrics and the evaluation report format.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

/// Tokens used for scoring: lowercased, whitespace-split, punctuation detached.
pub fn metric_tokens(text: &str) -> Vec<String> {
    normalize(text)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with uniform weights over 1..=`max_n`, clipped counts,
/// no smoothing and the standard brevity penalty. Any zero precision makes
/// the score 0; an empty candidate side scores 0.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], &[T])], max_n: usize) -> f64 {
    assert!(max_n >= 1, "BLEU order must be >= 1");
    let cand_len: usize = pairs.iter().map(|(c, _)| c.len()).sum();
    let ref_len: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in pairs {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total += c.len().saturating_sub(n - 1);
        }
        if matched == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_p / max_n as f64).exp()
}

pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    corpus_bleu(&[(candidate, reference)], max_n)
}

/// Mean of BLEU-1, BLEU-2 and BLEU-3.
pub fn corpus_avg_bleu<T: Eq + Hash>(pairs: &[(&[T], &[T])]) -> f64 {
    (1..=3).map(|n| corpus_bleu(pairs, n)).sum::<f64>() / 3.0
}

pub fn avg_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    corpus_avg_bleu(&[(candidate, reference)])
}

/// Harmonic mean of multiset unigram precision and recall.
pub fn unigram_f1<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    let rc = ngram_counts(reference, 1);
    let overlap: usize = ngram_counts(candidate, 1)
        .into_iter()
        .map(|(g, k)| k.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn contains_span<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Micro-averaged entity F1 over `(candidate tokens, gold entity token
/// sequences)` cases. A gold entity is found when its tokens occur
/// contiguously in the candidate. Only gold entities are scored, so there are
/// no false positives and F1 = 2·TP / (2·TP + FN). Cases with no gold
/// entities are skipped; if nothing is scorable the result is 0.
pub fn entity_f1<T: PartialEq>(cases: &[(&[T], &[Vec<T>])]) -> f64 {
    let (mut tp, mut fn_) = (0usize, 0usize);
    for (cand, gold) in cases {
        for e in gold.iter() {
            if contains_span(cand, e) {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fn_) as f64
}

/// Unique n-grams over total n-grams, pooled across texts. N-grams never
/// span two texts. Returns 0 when no text has `n` tokens.
pub fn distinct_n<T: Eq + Hash>(texts: &[&[T]], n: usize) -> f64 {
    let mut seen = HashMap::new();
    let mut total = 0usize;
    for t in texts {
        for (g, k) in ngram_counts(t, n) {
            *seen.entry(g).or_insert(0usize) += k;
            total += k;
        }
    }
    if total == 0 {
        return 0.0;
    }
    seen.len() as f64 / total as f64
}

/// `exp(total_nll / n_tokens)`.
pub fn perplexity(total_nll: f64, n_tokens: usize) -> f64 {
    (total_nll / n_tokens.max(1) as f64).exp()
}

pub fn accuracy<T: PartialEq>(predicted: &[T], gold: &[T]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len() as f64
}

/// Metrics selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Ppl,
    F1,
    EntityF1,
    Dist,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Bleu, Metric::Ppl, Metric::F1, Metric::EntityF1, Metric::Dist];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::Ppl => "ppl",
            Metric::F1 => "f1",
            Metric::EntityF1 => "entity_f1",
            Metric::Dist => "dist",
        }
    }

    /// Report columns produced by this metric.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Metric::Bleu => &["bleu1", "bleu2", "bleu3", "avg_bleu"],
            Metric::Ppl => &["ppl"],
            Metric::F1 => &["f1"],
            Metric::EntityF1 => &["entity_f1"],
            Metric::Dist => &["dist1", "dist2", "dist3"],
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Metric>> {
        let mut out: Vec<Metric> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("metric list is empty".into()));
        }
        Ok(out)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Per-example scores for one generated response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub response: String,
    pub gold: String,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub skill: String,
    pub skill_id: u32,
    pub metrics: BTreeMap<String, f64>,
    pub examples: Vec<ExampleScore>,
}

/// Identifies the adapter stack a skill was evaluated with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRef {
    pub skill_id: u32,
    pub name: String,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    pub backbone_hash: String,
    pub adapters: Vec<AdapterRef>,
    pub config: BTreeMap<String, String>,
    pub skills: Vec<SkillReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Header {
        corpus_id: String,
        backbone_hash: String,
        adapters: Vec<AdapterRef>,
        config: BTreeMap<String, String>,
    },
    Skill {
        skill: String,
        skill_id: u32,
        metrics: BTreeMap<String, f64>,
    },
    Example {
        skill_id: u32,
        #[serde(flatten)]
        score: ExampleScore,
    },
}

impl EvalReport {
    /// One header line, then per skill a summary line followed by its examples.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |rec: &ReportLine| {
            out.push_str(&serde_json::to_string(rec).expect("report serializes"));
            out.push('\n');
        };
        line(&ReportLine::Header {
            corpus_id: self.corpus_id.clone(),
            backbone_hash: self.backbone_hash.clone(),
            adapters: self.adapters.clone(),
            config: self.config.clone(),
        });
        for s in &self.skills {
            line(&ReportLine::Skill {
                skill: s.skill.clone(),
                skill_id: s.skill_id,
                metrics: s.metrics.clone(),
            });
            for e in &s.examples {
                line(&ReportLine::Example {
                    skill_id: s.skill_id,
                    score: e.clone(),
                });
            }
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report: Option<EvalReport> = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let rec: ReportLine =
                serde_json::from_str(raw).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            match (rec, report.as_mut()) {
                (
                    ReportLine::Header {
                        corpus_id,
                        backbone_hash,
                        adapters,
                        config,
                    },
                    None,
                ) => {
                    report = Some(EvalReport {
                        corpus_id,
                        backbone_hash,
                        adapters,
                        config,
                        skills: Vec::new(),
                    })
                }
                (ReportLine::Skill { skill, skill_id, metrics }, Some(r)) => r.skills.push(SkillReport {
                    skill,
                    skill_id,
                    metrics,
                    examples: Vec::new(),
                }),
                (ReportLine::Example { skill_id, score }, Some(r)) => match r.skills.last_mut() {
                    Some(s) if s.skill_id == skill_id => s.examples.push(score),
                    _ => return Err(Error::parse(i + 1, "example record outside its skill block")),
                },
                _ => return Err(Error::parse(i + 1, "report must start with exactly one header")),
            }
        }
        report.ok_or_else(|| Error::parse(1, "empty report"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Fixed-width summary table: one row per skill, one column per metric.
    pub fn table(&self) -> String {
        let mut cols: Vec<&str> = Vec::new();
        for s in &self.skills {
            for k in s.metrics.keys() {
                if !cols.contains(&k.as_str()) {
                    cols.push(k);
                }
            }
        }
        let order = |c: &str| {
            Metric::ALL
                .iter()
                .flat_map(|m| m.columns())
                .position(|x| *x == c)
                .unwrap_or(usize::MAX)
        };
        cols.sort_by_key(|c| (order(c), c.to_string()));
        let mut out = format!("{:<4} {:<16}", "id", "skill");
        for c in &cols {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
        for s in &self.skills {
            let _ = write!(out, "{:<4} {:<16}", s.skill_id, s.skill);
            for c in &cols {
                match s.metrics.get(*c) {
                    Some(v) if *c == "ppl" => {
                        let _ = write!(out, " {v:>9.3}");
                    }
                    Some(v) => {
                        let _ = write!(out, " {:>9.2}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
