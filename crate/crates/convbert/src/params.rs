//! Parameter naming, shapes, initialization, and tape binding.
//!
//! [`for_each_param`] walks every parameter of a configuration in one fixed
//! declaration order — embeddings first, then each layer's attention block and
//! feed-forward block. Everything that needs to agree on "what parameters exist"
//! (initialization, parameter counting, checkpoints, optimizer state) consumes this
//! one walk, so they cannot drift apart.
//!
//! Names are dotted paths (`layer3.attn.q.weight`); kinds separate plain weights from
//! biases and normalization gains so the optimizer can exclude the latter two from
//! weight decay.

use crate::config::ModelConfig;
use crate::error::{err, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// How a parameter behaves under regularization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight matrix or embedding table; weight decay applies.
    Weight,
    /// Additive bias; no weight decay.
    Bias,
    /// Multiplicative normalization gain; no weight decay.
    Gain,
}

/// Name, shape, and kind of one parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Visits every parameter of `cfg` in declaration order.
pub fn for_each_param(cfg: &ModelConfig, mut f: impl FnMut(ParamSpec)) {
    use ParamKind::*;
    let mut p = |name: String, shape: Vec<usize>, kind: ParamKind| f(ParamSpec { name, shape, kind });

    let d = cfg.hidden;
    let w = cfg.attn_width();

    p("embeddings.word".into(), vec![cfg.vocab_size, cfg.embedding], Weight);
    if cfg.needs_embedding_projection() {
        p("embeddings.proj.weight".into(), vec![cfg.embedding, d], Weight);
        p("embeddings.proj.bias".into(), vec![d], Bias);
    }
    p("embeddings.position".into(), vec![cfg.max_positions, d], Weight);
    p("embeddings.segment".into(), vec![2, d], Weight);
    p("embeddings.norm.gain".into(), vec![d], Gain);
    p("embeddings.norm.bias".into(), vec![d], Bias);

    for i in 0..cfg.layers {
        let l = format!("layer{i}");
        for proj in ["q", "k", "v"] {
            p(format!("{l}.attn.{proj}.weight"), vec![d, w], Weight);
            p(format!("{l}.attn.{proj}.bias"), vec![w], Bias);
        }
        if cfg.variant.has_conv() {
            p(format!("{l}.conv.v.weight"), vec![d, w], Weight);
            p(format!("{l}.conv.v.bias"), vec![w], Bias);
            p(format!("{l}.conv.span_dw"), vec![d, cfg.kernel_size], Weight);
            p(format!("{l}.conv.span_pw.weight"), vec![d, w], Weight);
            p(format!("{l}.conv.span_pw.bias"), vec![w], Bias);
            // Tap-logit map: per-head, biasless by design.
            p(
                format!("{l}.conv.kernel.weight"),
                vec![cfg.attn_heads(), cfg.head_dim, cfg.kernel_size],
                Weight,
            );
        }
        let merged = if cfg.variant.has_conv() { 2 * w } else { w };
        p(format!("{l}.attn.out.weight"), vec![merged, d], Weight);
        p(format!("{l}.attn.out.bias"), vec![d], Bias);
        p(format!("{l}.attn.norm.gain"), vec![d], Gain);
        p(format!("{l}.attn.norm.bias"), vec![d], Bias);

        let g = cfg.groups;
        if g == 1 {
            p(format!("{l}.ffn.in.weight"), vec![d, cfg.ffn_inner], Weight);
        } else {
            p(format!("{l}.ffn.in.weight"), vec![g, d / g, cfg.ffn_inner / g], Weight);
        }
        p(format!("{l}.ffn.in.bias"), vec![cfg.ffn_inner], Bias);
        if g == 1 {
            p(format!("{l}.ffn.out.weight"), vec![cfg.ffn_inner, d], Weight);
        } else {
            p(format!("{l}.ffn.out.weight"), vec![g, cfg.ffn_inner / g, d / g], Weight);
        }
        p(format!("{l}.ffn.out.bias"), vec![d], Bias);
        p(format!("{l}.ffn.norm.gain"), vec![d], Gain);
        p(format!("{l}.ffn.norm.bias"), vec![d], Bias);
    }
}

/// All parameter specs of a configuration, in declaration order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for_each_param(cfg, |s| specs.push(s));
    specs
}

/// Owned parameter values in declaration order, with name lookup.
#[derive(Debug, Clone)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// One standard normal draw via Box–Muller from two uniform draws.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]: keeps the log finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl ParamStore {
    /// Fresh encoder parameters: weights drawn normal with standard deviation 0.02,
    /// normalization gains 1, biases 0. Deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> ParamStore {
        ParamStore::from_specs(param_specs(cfg), seed)
    }

    /// All-zero encoder parameters (gains included) — a blank slate for loading into.
    pub fn zeros(cfg: &ModelConfig) -> ParamStore {
        ParamStore::zeros_from_specs(param_specs(cfg))
    }

    /// Initialized store over an arbitrary spec list (training heads use this),
    /// following the same per-kind rules as [`ParamStore::init`].
    pub fn from_specs(specs: Vec<ParamSpec>, seed: u64) -> ParamStore {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::zeros_from_specs(specs);
        for (spec, t) in store.specs.iter().zip(&mut store.tensors) {
            match spec.kind {
                ParamKind::Weight => {
                    for v in t.data_mut() {
                        *v = 0.02 * normal(&mut rng);
                    }
                }
                ParamKind::Gain => t.data_mut().fill(1.0),
                ParamKind::Bias => {}
            }
        }
        store
    }

    /// All-zero store over an arbitrary spec list.
    pub fn zeros_from_specs(specs: Vec<ParamSpec>) -> ParamStore {
        let tensors = specs
            .iter()
            .map(|s| Tensor::zeros(s.shape.clone()).expect("spec shapes are valid"))
            .collect();
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        ParamStore { specs, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Total scalar parameters.
    pub fn total_params(&self) -> u64 {
        self.specs.iter().map(|s| s.numel() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.specs.iter().zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let &i = self.index.get(name).ok_or_else(|| err!(Contract, "no parameter named {name:?}"))?;
        Ok(&self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let &i = self.index.get(name).ok_or_else(|| err!(Contract, "no parameter named {name:?}"))?;
        Ok(&mut self.tensors[i])
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Puts every parameter on a tape as a gradient-requiring leaf, in declaration
    /// order. The returned binding resolves names to tape ids.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = Vec::with_capacity(self.specs.len());
        for t in &self.tensors {
            let mut tracked = t.clone();
            tracked.set_requires_grad(true);
            ids.push(tape.leaf(&tracked));
        }
        BoundParams { ids, index: self.index.clone() }
    }
}

/// Tape ids of one [`ParamStore::bind`] call, in declaration order.
pub struct BoundParams {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Assembles a binding from raw parts — for callers that placed the leaves on
    /// the tape themselves (the gradient checker does this).
    pub fn from_parts(ids: Vec<TensorId>, index: HashMap<String, usize>) -> BoundParams {
        BoundParams { ids, index }
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        let &i = self.index.get(name).ok_or_else(|| err!(Contract, "no parameter named {name:?}"))?;
        Ok(self.ids[i])
    }

    /// A copy of this binding with `name` pointing at `id`, appending the name if it
    /// was absent. Lets two models on one tape share a tensor (a word-embedding
    /// table, say) while each keeps its own store: build the forward pass with the
    /// rebound copy, but collect gradients through the original binding so they stay
    /// aligned with the store.
    pub fn rebind(&self, name: &str, id: TensorId) -> BoundParams {
        let mut ids = self.ids.clone();
        let mut index = self.index.clone();
        match index.get(name) {
            Some(&i) => ids[i] = id,
            None => {
                index.insert(name.to_string(), ids.len());
                ids.push(id);
            }
        }
        BoundParams { ids, index }
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}
