//! Sample-and-rerank: candidate responses are scored by a per-style
//! classifier and the best one is returned.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{normalize, TokenId};

/// Anything that maps a response text to a score in `[0, 1]`.
pub trait ResponseScorer: Send + Sync {
    fn score(&self, text: &str) -> f64;
}

impl<F: Fn(&str) -> f64 + Send + Sync> ResponseScorer for F {
    fn score(&self, text: &str) -> f64 {
        self(text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub scores: BTreeMap<u32, f64>,
    pub chosen: bool,
}

/// Index of the highest score; exact ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores every candidate under `style_id` and marks the argmax as chosen.
pub fn rerank(
    candidates: Vec<(String, Vec<TokenId>)>,
    style_id: u32,
    scorer: &dyn ResponseScorer,
) -> Result<Vec<ScoredResponse>> {
    if candidates.is_empty() {
        return Err(Error::Config("rerank needs at least one candidate".into()));
    }
    let scores: Vec<f64> = candidates.iter().map(|(t, _)| scorer.score(t)).collect();
    let best = select_best(&scores).expect("nonempty");
    Ok(candidates
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, ((text, tokens), s))| ScoredResponse {
            text,
            tokens,
            scores: BTreeMap::from([(style_id, s)]),
            chosen: i == best,
        })
        .collect())
}

/// Unigram and bigram counts of the normalized text.
fn ngrams(text: &str) -> Vec<String> {
    let toks = normalize(text);
    let mut out = toks.clone();
    out.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

/// Logistic regression over 1–2-gram counts.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleClassifier {
    pub style_id: u32,
    features: Vec<String>,
    index: HashMap<String, usize>,
    weights: Vec<f32>,
    bias: f32,
}

impl StyleClassifier {
    fn new(style_id: u32, features: Vec<String>, weights: Vec<f32>, bias: f32) -> Self {
        let index = features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Self {
            style_id,
            features,
            index,
            weights,
            bias,
        }
    }

    fn sparse(&self, text: &str) -> BTreeMap<usize, f64> {
        let mut x = BTreeMap::new();
        for g in ngrams(text) {
            if let Some(&i) = self.index.get(&g) {
                *x.entry(i).or_insert(0.0) += 1.0;
            }
        }
        x
    }

    /// Pre-sigmoid activation.
    pub fn logit(&self, text: &str) -> f64 {
        self.sparse(text)
            .iter()
            .map(|(&i, c)| self.weights[i] as f64 * c)
            .sum::<f64>()
            + self.bias as f64
    }

    /// Probability that `text` is in this style.
    pub fn probability(&self, text: &str) -> f64 {
        sigmoid(self.logit(text))
    }

    /// Weight of an n-gram feature (`"a"` or `"a b"`); unseen features weigh 0.
    pub fn weight(&self, ngram: &str) -> f32 {
        self.index.get(ngram).map_or(0.0, |&i| self.weights[i])
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("style");
        c.set_meta("style_id", self.style_id);
        c.set_meta(
            "features",
            serde_json::to_string(&self.features).expect("strings serialize"),
        );
        c.set_meta("trained", true);
        c.push("weights", Tensor::new(vec![self.weights.len()], self.weights.clone()).expect("1-d"));
        c.push("bias", Tensor::scalar(self.bias));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("style")?;
        let features: Vec<String> = serde_json::from_str(c.meta("features")?)
            .map_err(|e| Error::Config(format!("style feature table: {e}")))?;
        let weights = c.tensor("weights")?.data().to_vec();
        if weights.len() != features.len() {
            return Err(Error::Shape(format!(
                "{} style weights for {} features",
                weights.len(),
                features.len()
            )));
        }
        let bias = c.tensor("bias")?.data()[0];
        Ok(Self::new(c.meta_parse("style_id")?, features, weights, bias))
    }
}

impl ResponseScorer for StyleClassifier {
    fn score(&self, text: &str) -> f64 {
        self.probability(text)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
            heldout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub style_id: u32,
    pub n_train: usize,
    pub n_heldout: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Every positive text also occurs among the negatives.
    pub degenerate: bool,
}

/// Full-batch gradient descent on the mean logistic loss, from zero weights.
/// Deterministic given the inputs and `cfg.seed` (which only shuffles the
/// held-out split).
pub fn train_style_classifier(
    style_id: u32,
    positive: &[String],
    negative: &[String],
    cfg: &StyleTrainConfig,
) -> Result<(StyleClassifier, StyleReport)> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Config("style classifier needs texts of both classes".into()));
    }
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.heldout_fraction) {
        return Err(Error::Config("style training needs lr > 0 and heldout_fraction in [0, 1)".into()));
    }
    let neg_set: BTreeSet<&String> = negative.iter().collect();
    let degenerate = positive.iter().all(|p| neg_set.contains(p));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fn split<'a>(rng: &mut ChaCha8Rng, texts: &'a [String], label: f64, frac: f64) -> (Vec<(&'a String, f64)>, Vec<(&'a String, f64)>) {
        let mut items: Vec<(&String, f64)> = texts.iter().map(|t| (t, label)).collect();
        items.shuffle(rng);
        let n_held = (items.len() as f64 * frac).floor() as usize;
        let held = items.split_off(items.len() - n_held);
        (items, held)
    }
    let (mut train, mut held) = split(&mut rng, positive, 1.0, cfg.heldout_fraction);
    let (t2, h2) = split(&mut rng, negative, 0.0, cfg.heldout_fraction);
    train.extend(t2);
    held.extend(h2);

    let features: Vec<String> = train
        .iter()
        .flat_map(|(t, _)| ngrams(t))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut model = StyleClassifier::new(style_id, features, Vec::new(), 0.0);
    let xs: Vec<BTreeMap<usize, f64>> = train.iter().map(|(t, _)| model.sparse(t)).collect();

    let n = train.len() as f64;
    let mut w = vec![0.0f64; model.features.len()];
    let mut b = 0.0f64;
    let mut grad = vec![0.0f64; w.len()];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, (_, y)) in xs.iter().zip(&train) {
            let z = x.iter().map(|(&i, c)| w[i] * c).sum::<f64>() + b;
            let err = sigmoid(z) - y;
            for (&i, c) in x {
                grad[i] += err * c;
            }
            gb += err;
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= cfg.lr * (gi / n + cfg.l2 * *wi);
        }
        b -= cfg.lr * gb / n;
    }
    model.weights = w.iter().map(|&v| v as f32).collect();
    model.bias = b as f32;

    let acc = |set: &[(&String, f64)]| {
        if set.is_empty() {
            return f64::NAN;
        }
        let hits = set
            .iter()
            .filter(|(t, y)| (model.probability(t) >= 0.5) == (*y == 1.0))
            .count();
        hits as f64 / set.len() as f64
    };
    let report = StyleReport {
        style_id,
        n_train: train.len(),
        n_heldout: held.len(),
        train_accuracy: acc(&train),
        heldout_accuracy: acc(&held),
        degenerate,
    };
    Ok((model, report))
}
