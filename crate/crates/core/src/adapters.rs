//! Residual adapters: `A(H) = ReLU(LN(H)·W_down)·W_up + H`, one per
//! transformer block, bundled into a stack per skill.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{hex, ModelConfig, INIT_STD, LN_EPS};
use crate::checkpoint::Checkpoint;
use crate::dialogue::SkillId;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    /// `d × h` down-projection.
    pub w_down: Tensor,
    /// `h × d` up-projection.
    pub w_up: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl AdapterLayer {
    pub fn hidden_dim(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.shape()[1]
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_down, &self.w_up, &self.ln_gamma, &self.ln_beta]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.w_down,
            &mut self.w_up,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }
}

const ADAPTER_TENSORS: [&str; 4] = ["w_down", "w_up", "ln.gamma", "ln.beta"];

/// `ReLU(LN(H)·W_down)·W_up + H` row-wise over `H: n×d`.
pub fn adapter_forward(layer: &AdapterLayer, hidden: &Tensor) -> Result<Tensor> {
    let d = layer.hidden_dim();
    if hidden.cols() != d {
        return Err(Error::Shape(format!(
            "adapter expects hidden width {d}, got {}",
            hidden.cols()
        )));
    }
    let mut g = Graph::new();
    let vars = AdapterLayerVars::bind(layer, &mut g, false);
    let h = g.constant(hidden);
    let out = vars.apply(&mut g, h)?;
    Ok(g.into_value(out))
}

/// Provenance recorded alongside a trained stack.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub name: String,
    pub family: String,
    pub corpus_id: String,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub skill_id: Option<SkillId>,
    pub layers: Vec<AdapterLayer>,
    pub bottleneck: usize,
    pub meta: AdapterMeta,
    sealed: bool,
}

/// Adapter parameter counts. `projections = 2·L·d·h`; layer-norm affine
/// terms are reported separately in `aux`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterParamCount {
    pub projections: u64,
    pub aux: u64,
}

pub fn adapter_param_count(n_layers: u64, hidden_dim: u64, bottleneck: u64) -> AdapterParamCount {
    AdapterParamCount {
        projections: 2 * n_layers * hidden_dim * bottleneck,
        aux: 2 * n_layers * hidden_dim,
    }
}

impl AdapterStack {
    /// Fresh stack that is an exact identity: `W_down ~ normal(0, 0.02)`,
    /// `W_up = 0`, `gamma = 1`, `beta = 0`.
    pub fn init(config: &ModelConfig, bottleneck: usize, seed: u64) -> Result<Self> {
        let d = config.hidden_dim;
        if bottleneck == 0 || bottleneck >= d {
            return Err(Error::Config(format!(
                "bottleneck {bottleneck} must satisfy 1 <= h < {d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..config.n_layers)
            .map(|_| AdapterLayer {
                w_down: Tensor::randn(&[d, bottleneck], INIT_STD, &mut rng),
                w_up: Tensor::zeros(&[bottleneck, d]),
                ln_gamma: Tensor::ones(&[d]),
                ln_beta: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            skill_id: None,
            layers,
            bottleneck,
            meta: AdapterMeta {
                seed,
                ..Default::default()
            },
            sealed: false,
        })
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "adapter has {} layers, backbone has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        if let Some(l) = self.layers.iter().find(|l| l.hidden_dim() != config.hidden_dim) {
            return Err(Error::Shape(format!(
                "adapter width {} does not match backbone width {}",
                l.hidden_dim(),
                config.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in ADAPTER_TENSORS.iter().zip(l.tensors()) {
                out.push((format!("adapters.{i}.{name}"), t));
            }
        }
        out
    }

    /// Mutable tensors in `named_tensors` order. Fails once sealed.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.sealed {
            return Err(Error::State("adapter stack is sealed".into()));
        }
        Ok(self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect())
    }

    pub fn parameter_count(&self) -> AdapterParamCount {
        let l = self.layers.len() as u64;
        let d = self.layers.first().map_or(0, |l| l.hidden_dim()) as u64;
        adapter_param_count(l, d, self.bottleneck as u64)
    }

    /// SHA-256 over tensor names, shapes and values.
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

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> AdapterVars {
        AdapterVars {
            layers: self
                .layers
                .iter()
                .map(|l| AdapterLayerVars::bind(l, g, trainable))
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("adapter");
        c.set_meta("skill_id", self.skill_id.map_or(0, |s| s.0));
        c.set_meta("name", &self.meta.name);
        c.set_meta("family", &self.meta.family);
        c.set_meta("h", self.bottleneck);
        c.set_meta("corpus_id", &self.meta.corpus_id);
        c.set_meta("seed", self.meta.seed);
        c.set_meta("epochs", self.meta.epochs);
        c.set_meta("n_layers", self.layers.len());
        c.set_meta("sealed", self.sealed);
        for (name, t) in self.named_tensors() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("adapter")?;
        let n_layers: usize = c.meta_parse("n_layers")?;
        let bottleneck: usize = c.meta_parse("h")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let get = |name: &str| c.tensor(&format!("adapters.{i}.{name}")).cloned();
            let layer = AdapterLayer {
                w_down: get("w_down")?,
                w_up: get("w_up")?,
                ln_gamma: get("ln.gamma")?,
                ln_beta: get("ln.beta")?,
            };
            if layer.bottleneck() != bottleneck || layer.w_up.shape() != [bottleneck, layer.hidden_dim()] {
                return Err(Error::Shape(format!("adapter layer {i} has inconsistent shapes")));
            }
            layers.push(layer);
        }
        let skill: u32 = c.meta_parse("skill_id")?;
        Ok(Self {
            skill_id: (skill > 0).then_some(SkillId(skill)),
            layers,
            bottleneck,
            meta: AdapterMeta {
                name: c.meta("name")?.to_string(),
                family: c.meta("family")?.to_string(),
                corpus_id: c.meta("corpus_id")?.to_string(),
                seed: c.meta_parse("seed")?,
                epochs: c.meta_parse("epochs")?,
            },
            sealed: c.meta_parse("sealed")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AdapterLayerVars {
    pub w_down: Var,
    pub w_up: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

impl AdapterLayerVars {
    fn bind<'a>(layer: &'a AdapterLayer, g: &mut Graph<'a>, trainable: bool) -> Self {
        let mut leaf = |t: &'a Tensor| if trainable { g.param(t) } else { g.constant(t) };
        Self {
            w_down: leaf(&layer.w_down),
            w_up: leaf(&layer.w_up),
            ln_gamma: leaf(&layer.ln_gamma),
            ln_beta: leaf(&layer.ln_beta),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let normed = g.layer_norm(hidden, self.ln_gamma, self.ln_beta, LN_EPS)?;
        let down = g.matmul(normed, self.w_down)?;
        let act = g.relu(down)?;
        let up = g.matmul(act, self.w_up)?;
        g.add(up, hidden)
    }
}

#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub layers: Vec<AdapterLayerVars>,
}

impl AdapterVars {
    pub fn apply(&self, g: &mut Graph<'_>, layer: usize, hidden: Var) -> Result<Var> {
        self.layers[layer].apply(g, hidden)
    }

    /// Handles in `AdapterStack::named_tensors` order.
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.w_down, l.w_up, l.ln_gamma, l.ln_beta])
            .collect()
    }
}

/// Registered stacks, indexed `1..=p` in registration order.
#[derive(Clone, Debug, Default)]
pub struct AdapterSet {
    stacks: Vec<AdapterStack>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    /// Appends a sealed stack as skill `p + 1`. Existing stacks are untouched.
    pub fn register(&mut self, mut stack: AdapterStack, config: &ModelConfig) -> Result<SkillId> {
        if !stack.is_sealed() {
            return Err(Error::Contract("only sealed adapter stacks can be registered".into()));
        }
        stack.check_compatible(config)?;
        let id = SkillId(self.stacks.len() as u32 + 1);
        stack.skill_id = Some(id);
        self.stacks.push(stack);
        Ok(id)
    }

    pub fn get(&self, id: SkillId) -> Result<&AdapterStack> {
        id.0
            .checked_sub(1)
            .and_then(|i| self.stacks.get(i as usize))
            .ok_or(Error::Routing(id.0))
    }

    pub fn ids(&self) -> impl Iterator<Item = SkillId> + '_ {
        (1..=self.stacks.len() as u32).map(SkillId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SkillId, &AdapterStack)> {
        self.stacks
            .iter()
            .enumerate()
            .map(|(i, s)| (SkillId(i as u32 + 1), s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            max_seq_len: 10,
            bottleneck: 3,
        }
    }

    fn sealed(seed: u64) -> AdapterStack {
        let mut s = AdapterStack::init(&cfg(), 3, seed).unwrap();
        s.seal();
        s
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let stack = AdapterStack::init(&cfg(), 3, 1).unwrap();
        let h = Tensor::from_rows(&[&[0.3, -1.0, 2.0, 0.0, 0.5, 0.25, -0.75, 1.5]]);
        let out = adapter_forward(&stack.layers[0], &h).unwrap();
        assert_eq!(out.to_le_bytes(), h.to_le_bytes());
    }

    #[test]
    fn zero_down_projection_is_identity() {
        let mut stack = AdapterStack::init(&cfg(), 3, 1).unwrap();
        stack.layers[0].w_down = Tensor::zeros(&[8, 3]);
        stack.layers[0].w_up = Tensor::ones(&[3, 8]);
        let h = Tensor::from_rows(&[&[0.3, -1.0, 2.0, 0.0, 0.5, 0.25, -0.75, 1.5]]);
        let out = adapter_forward(&stack.layers[0], &h).unwrap();
        assert_eq!(out.to_le_bytes(), h.to_le_bytes());
    }

    #[test]
    fn hand_evaluated_two_dim_case() {
        // H = [1, 3]: mean 2, var 1 => LN = [-1, 1] (eps shifts this by ~5e-6).
        // W_down = [1, 0]^T => pre-activation -1 -> ReLU 0; use [0, 1]^T => 1.
        // W_up = [[2, -1]] => adds [2, -1] => [3, 2].
        let layer = AdapterLayer {
            w_down: Tensor::from_rows(&[&[0.0], &[1.0]]),
            w_up: Tensor::from_rows(&[&[2.0, -1.0]]),
            ln_gamma: Tensor::ones(&[2]),
            ln_beta: Tensor::zeros(&[2]),
        };
        let h = Tensor::from_rows(&[&[1.0, 3.0]]);
        let out = adapter_forward(&layer, &h).unwrap();
        let z = 1.0 / (1.0f64 + 1e-5).sqrt();
        let expected = [1.0 + 2.0 * z, 3.0 - z];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }

        let blocked = AdapterLayer {
            w_down: Tensor::from_rows(&[&[1.0], &[0.0]]),
            ..layer
        };
        let out = adapter_forward(&blocked, &h).unwrap();
        assert_eq!(out.data(), &[1.0, 3.0]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let stack = AdapterStack::init(&cfg(), 3, 1).unwrap();
        let h = Tensor::zeros(&[2, 5]);
        assert!(matches!(adapter_forward(&stack.layers[0], &h), Err(Error::Shape(_))));
    }

    #[test]
    fn init_range_checked() {
        assert!(AdapterStack::init(&cfg(), 0, 1).is_err());
        assert!(AdapterStack::init(&cfg(), 8, 1).is_err());
        assert_eq!(AdapterStack::init(&cfg(), 2, 7).unwrap(), AdapterStack::init(&cfg(), 2, 7).unwrap());
    }

    #[test]
    fn large_config_shapes() {
        let big = ModelConfig {
            vocab_size: 10,
            n_layers: 1,
            hidden_dim: 1024,
            n_heads: 16,
            max_seq_len: 4,
            bottleneck: 200,
        };
        let s = AdapterStack::init(&big, 200, 0).unwrap();
        assert_eq!(s.layers[0].w_down.shape(), &[1024, 200]);
        assert_eq!(s.layers[0].w_up.shape(), &[200, 1024]);
    }

    #[test]
    fn param_counts() {
        assert_eq!(adapter_param_count(24, 1024, 200).projections, 9_830_400);
        assert_eq!(adapter_param_count(1, 1, 1).projections, 2);
        assert_eq!(adapter_param_count(24, 1024, 200).aux, 2 * 24 * 1024);
    }

    #[test]
    fn fresh_stack_leaves_logits_bit_identical() {
        let model = Backbone::build(cfg(), 4).unwrap();
        let stack = AdapterStack::init(&cfg(), 3, 9).unwrap();
        let toks = [3, 5, 7, 2, 9];
        let bare = model.forward(&toks, None).unwrap();
        let with = model.forward(&toks, Some(&stack)).unwrap();
        assert_eq!(bare.to_le_bytes(), with.to_le_bytes());
    }

    #[test]
    fn registration_assigns_contiguous_ids() {
        let mut set = AdapterSet::new();
        assert_eq!(set.register(sealed(1), &cfg()).unwrap(), SkillId(1));
        let before = set.get(SkillId(1)).unwrap().content_hash();
        assert_eq!(set.register(sealed(2), &cfg()).unwrap(), SkillId(2));
        assert_eq!(set.register(sealed(3), &cfg()).unwrap(), SkillId(3));
        assert_eq!(set.get(SkillId(1)).unwrap().content_hash(), before);
        assert_eq!(set.ids().collect::<Vec<_>>(), [SkillId(1), SkillId(2), SkillId(3)]);
        assert!(matches!(set.get(SkillId(4)), Err(Error::Routing(4))));
        assert!(matches!(set.get(SkillId(0)), Err(Error::Routing(0))));
    }

    #[test]
    fn unsealed_registration_rejected() {
        let mut set = AdapterSet::new();
        let s = AdapterStack::init(&cfg(), 3, 1).unwrap();
        assert!(matches!(set.register(s, &cfg()), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = sealed(4);
        s.meta.name = "weather".into();
        s.meta.corpus_id = "suite/weather".into();
        s.skill_id = Some(SkillId(2));
        let back = AdapterStack::from_checkpoint(
            &Checkpoint::from_bytes(&s.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, s);
    }
}
