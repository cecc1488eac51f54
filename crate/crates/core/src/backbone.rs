//! Decoder-only transformer language model with an adapter hook after every
//! block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterStack, AdapterVars};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{TokenId, EOS};

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Default adapter bottleneck width.
    pub bottleneck: usize,
}

impl ModelConfig {
    /// Desk-scale configuration: L=2, d=64, 4 heads, 128 positions, h=16.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 4,
            max_seq_len: 128,
            bottleneck: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("bottleneck", self.bottleneck),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.bottleneck >= self.hidden_dim {
            return Err(Error::Config(format!(
                "bottleneck {} must be smaller than hidden_dim {}",
                self.bottleneck, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gamma", "ln2.beta", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl LayerParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden_dim;
        let f = cfg.ff_dim();
        Self {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], INIT_STD, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w_ff1: Tensor::randn(&[d, f], INIT_STD, rng),
            b_ff1: Tensor::zeros(&[f]),
            w_ff2: Tensor::randn(&[f, d], INIT_STD, rng),
            b_ff2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gamma, &self.ln2_beta, &self.w_ff1,
            &self.b_ff1, &self.w_ff2, &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gamma, &mut self.ln2_beta, &mut self.w_ff1, &mut self.b_ff1,
            &mut self.w_ff2, &mut self.b_ff2,
        ]
    }
}

/// Graph handles for one transformer block, in `LAYER_TENSORS` order.
#[derive(Clone, Debug)]
pub struct LayerVars([Var; 16]);

/// Graph handles for every backbone tensor.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub token_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_gamma: Var,
    pub lnf_beta: Var,
}

impl BackboneVars {
    /// Handles in `Backbone::named_tensors` order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.token_emb, self.pos_emb];
        for l in &self.layers {
            v.extend_from_slice(&l.0);
        }
        v.push(self.lnf_gamma);
        v.push(self.lnf_beta);
        v
    }
}

/// One training/evaluation row: `tokens` holds context, the system
/// separator, the response and a closing EOS; loss is taken on positions
/// at or after `response_start`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmExample {
    pub tokens: Vec<TokenId>,
    pub response_start: usize,
}

impl LmExample {
    pub fn input(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets for each input position; context positions are `None`.
    pub fn targets(&self) -> Vec<Option<TokenId>> {
        (1..self.tokens.len())
            .map(|i| (i >= self.response_start).then_some(self.tokens[i]))
            .collect()
    }

    pub fn n_targets(&self) -> usize {
        self.tokens.len() - self.response_start
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankParams {
    pub style_id: u32,
    pub n_candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub k: usize,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub rerank: Option<RerankParams>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            k: 8,
            temperature: 1.0,
            max_new_tokens: 32,
            seed: 0,
            rerank: None,
        }
    }
}

impl DecodeParams {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn top_k(k: usize, temperature: f32, seed: u64) -> Self {
        Self {
            mode: DecodeMode::TopK,
            k,
            temperature,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("decode k must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("decode temperature must be > 0".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if let Some(r) = &self.rerank {
            if r.n_candidates == 0 {
                return Err(Error::Config("rerank needs at least one candidate".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    frozen: bool,
}

impl Backbone {
    /// Weights drawn from `normal(0, 0.02)`; biases zero; norms identity.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let token_emb = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::init(&config, &mut rng))
            .collect();
        Ok(Self {
            token_emb,
            pos_emb,
            layers,
            lnf_gamma: Tensor::ones(&[d]),
            lnf_beta: Tensor::zeros(&[d]),
            config,
            frozen: false,
        })
    }

    /// Zeroes the (tied) output head, giving a uniform next-token distribution.
    pub fn with_zero_output_head(mut self) -> Self {
        self.token_emb = Tensor::zeros(self.token_emb.shape());
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the backbone read-only and returns its content hash.
    pub fn freeze(&mut self) -> String {
        self.frozen = true;
        self.content_hash()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf.gamma".to_string(), &self.lnf_gamma));
        out.push(("lnf.beta".to_string(), &self.lnf_beta));
        out
    }

    /// Mutable tensors in `named_tensors` order. Fails once frozen.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.frozen {
            return Err(Error::State("backbone is frozen".into()));
        }
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every tensor name, shape and value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Registers every tensor on `g`; trainable leaves when `trainable`,
    /// frozen constants otherwise.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> BackboneVars {
        let mut leaf = |t: &'a Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let token_emb = leaf(&self.token_emb);
        let pos_emb = leaf(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars(l.tensors().map(&mut leaf)))
            .collect();
        let lnf_gamma = leaf(&self.lnf_gamma);
        let lnf_beta = leaf(&self.lnf_beta);
        BackboneVars {
            token_emb,
            pos_emb,
            layers,
            lnf_gamma,
            lnf_beta,
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on an empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn check_adapter(&self, adapter: Option<&AdapterStack>) -> Result<()> {
        if let Some(a) = adapter {
            a.check_compatible(&self.config)?;
        }
        Ok(())
    }

    /// Token plus position embeddings.
    pub fn embed(&self, g: &mut Graph<'_>, vars: &BackboneVars, tokens: &[TokenId]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let tok = g.embedding(vars.token_emb, tokens)?;
        let positions: Vec<TokenId> = (0..tokens.len() as TokenId).collect();
        let pos = g.embedding(vars.pos_emb, &positions)?;
        g.add(tok, pos)
    }

    /// One pre-norm block: causal multi-head attention then feed-forward,
    /// each with a residual connection.
    pub fn block(&self, g: &mut Graph<'_>, layer: &LayerVars, x: Var) -> Result<Var> {
        let w = &layer.0;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();

        let a = g.layer_norm(x, w[0], w[1], LN_EPS)?;
        let q = g.matmul(a, w[2])?;
        let q = g.add_bias(q, w[3])?;
        let k = g.matmul(a, w[4])?;
        let k = g.add_bias(k, w[5])?;
        let v = g.matmul(a, w[6])?;
        let v = g.add_bias(v, w[7])?;
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.causal_softmax(scores)?;
            head_out.push(g.matmul(probs, vh)?);
        }
        let attn = if heads == 1 {
            head_out[0]
        } else {
            g.concat_cols(&head_out)?
        };
        let attn = g.matmul(attn, w[8])?;
        let attn = g.add_bias(attn, w[9])?;
        let x = g.add(x, attn)?;

        let f = g.layer_norm(x, w[10], w[11], LN_EPS)?;
        let f = g.matmul(f, w[12])?;
        let f = g.add_bias(f, w[13])?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w[14])?;
        let f = g.add_bias(f, w[15])?;
        g.add(x, f)
    }

    /// Final norm and tied output projection.
    pub fn head(&self, g: &mut Graph<'_>, vars: &BackboneVars, x: Var) -> Result<Var> {
        let x = g.layer_norm(x, vars.lnf_gamma, vars.lnf_beta, LN_EPS)?;
        g.matmul_t(x, vars.token_emb)
    }

    /// Logits for every position, with the adapter (if any) applied to the
    /// output of each block before the next one.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        vars: &BackboneVars,
        tokens: &[TokenId],
        adapter: Option<&AdapterVars>,
    ) -> Result<Var> {
        let x = self.embed(g, vars, tokens)?;
        let x = self.block(g, &vars.layers[0], x)?;
        self.forward_from(g, vars, x, 0, adapter)
    }

    /// Continues a forward pass from the raw output of block `layer`
    /// (before its adapter). Lets callers cache the frozen prefix.
    pub fn forward_from(
        &self,
        g: &mut Graph<'_>,
        vars: &BackboneVars,
        block_out: Var,
        layer: usize,
        adapter: Option<&AdapterVars>,
    ) -> Result<Var> {
        let mut x = block_out;
        for i in layer..vars.layers.len() {
            if i > layer {
                x = self.block(g, &vars.layers[i], x)?;
            }
            if let Some(a) = adapter {
                x = a.apply(g, i, x)?;
            }
        }
        self.head(g, vars, x)
    }

    /// Raw output of the first block for `tokens`; depends only on the
    /// (frozen) backbone.
    pub fn first_block(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = self.embed(&mut g, &vars, tokens)?;
        let x = self.block(&mut g, &vars.layers[0], x)?;
        Ok(g.into_value(x))
    }

    /// Pure inference forward: `len × V` logits.
    pub fn forward(&self, tokens: &[TokenId], adapter: Option<&AdapterStack>) -> Result<Tensor> {
        self.check_adapter(adapter)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let avars = adapter.map(|a| a.bind(&mut g, false));
        let logits = self.forward_graph(&mut g, &vars, tokens, avars.as_ref())?;
        Ok(g.into_value(logits))
    }

    /// Autoregressive decoding until EOS, `max_new_tokens`, or the context
    /// window is full. The EOS token is not included in the output.
    pub fn generate(
        &self,
        context: &[TokenId],
        adapter: Option<&AdapterStack>,
        decode: &DecodeParams,
    ) -> Result<Vec<TokenId>> {
        if context.is_empty() {
            return Err(Error::Contract("generate needs a nonempty context".into()));
        }
        decode.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
        let mut seq = context.to_vec();
        let mut out = Vec::new();
        while out.len() < decode.max_new_tokens && seq.len() < self.config.max_seq_len {
            let logits = self.forward(&seq, adapter)?;
            let last = logits.row(logits.rows() - 1);
            let next = match decode.mode {
                DecodeMode::Greedy => argmax(last),
                DecodeMode::TopK => sample_top_k(last, decode.k, decode.temperature, &mut rng),
            };
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Summed response-token NLL and the number of response tokens.
    pub fn nll(&self, adapter: Option<&AdapterStack>, example: &LmExample) -> Result<(f64, usize)> {
        self.check_adapter(adapter)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let avars = adapter.map(|a| a.bind(&mut g, false));
        let logits = self.forward_graph(&mut g, &vars, example.input(), avars.as_ref())?;
        let loss = g.cross_entropy_masked(logits, &example.targets(), 1.0)?;
        Ok((g.value(loss).data()[0] as f64, example.n_targets()))
    }

    /// `exp` of the mean NLL over all response tokens of `corpus`.
    pub fn perplexity(&self, adapter: Option<&AdapterStack>, corpus: &[LmExample]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Contract("perplexity of an empty corpus".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in corpus {
            let (nll, n) = self.nll(adapter, ex)?;
            total += nll;
            count += n;
        }
        Ok((total / count as f64).exp())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("backbone");
        let cfg = &self.config;
        c.set_meta("vocab_size", cfg.vocab_size);
        c.set_meta("n_layers", cfg.n_layers);
        c.set_meta("hidden_dim", cfg.hidden_dim);
        c.set_meta("n_heads", cfg.n_heads);
        c.set_meta("max_seq_len", cfg.max_seq_len);
        c.set_meta("bottleneck", cfg.bottleneck);
        c.set_meta("frozen", self.frozen);
        c.set_meta("content_hash", self.content_hash());
        for (name, t) in self.named_tensors() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("backbone")?;
        let config = ModelConfig {
            vocab_size: c.meta_parse("vocab_size")?,
            n_layers: c.meta_parse("n_layers")?,
            hidden_dim: c.meta_parse("hidden_dim")?,
            n_heads: c.meta_parse("n_heads")?,
            max_seq_len: c.meta_parse("max_seq_len")?,
            bottleneck: c.meta_parse("bottleneck")?,
        };
        let mut model = Self::build(config, 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.tensors_mut()?) {
            let t = c.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        model.frozen = c.meta_parse("frozen")?;
        let expected = c.meta("content_hash")?;
        if model.content_hash() != expected {
            return Err(Error::Config("backbone checkpoint content hash mismatch".into()));
        }
        Ok(model)
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample_top_k(logits: &[f32], k: usize, temperature: f32, rng: &mut ChaCha8Rng) -> TokenId {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.min(logits.len()));
    if order.len() == 1 {
        return order[0] as TokenId;
    }
    let max = logits[order[0]];
    let weights: Vec<f32> = order
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f32 = weights.iter().sum();
    let mut u = rng.random::<f32>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i as TokenId;
        }
        u -= w;
    }
    *order.last().expect("k >= 1") as TokenId
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
