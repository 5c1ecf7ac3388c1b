//! Toy encoder-decoder and decoder-only transformer language models.
//!
//! Parameters live in a flat name → tensor map. Method attachments (LoRA,
//! K-Adapter, Modular) are recorded in the architecture descriptor as
//! [`Expansion`] entries whose parameters are prefixed `x{index}.`, so a
//! checkpoint fully describes the function it computes.

mod checkpoint;
mod decode;
mod forward;
mod masking;

use std::collections::{BTreeMap, BTreeSet};

use ckl_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use decode::{answer_ranks, greedy_decode, greedy_decode_batch, rank_answer_token};
pub use forward::{forward_loss, items_loss, loss_and_grads, output_logits, Grads, LmItem};
pub use masking::{ssm_mask, unmask, MaskedExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    EncoderDecoder,
    DecoderOnly,
}

/// Parameters added on top of the base model by a continual-learning method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Expansion {
    /// Low-rank pairs `W + A·B` on the listed weight names.
    Lora { rank: usize, scaling: f32, targets: Vec<String> },
    /// Chain of transformer-layer adapters reading the main stack at `layers`.
    KAdapter { layers: Vec<usize> },
    /// Narrow trainable encoder added to the frozen encoder through a projection.
    Modular {
        width: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub expansions: Vec<Expansion>,
}

impl Architecture {
    /// 2 layers, 2 heads, width 64, feed-forward 128, length 32.
    pub fn toy(kind: ModelKind, vocab_size: usize) -> Self {
        Self {
            kind,
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 128,
            max_len: 32,
            vocab_size,
            expansions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CklError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("zero-sized architecture {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.vocab_size <= crate::vocab::NUM_SPECIALS || self.vocab_size > 2048 {
            return bad(format!("vocabulary size {} outside (specials, 2048]", self.vocab_size));
        }
        Ok(())
    }

    /// Prefix of the stack that probing reads first: the encoder, or the
    /// decoder for decoder-only models.
    pub fn main_stack(&self) -> &'static str {
        match self.kind {
            ModelKind::EncoderDecoder => "enc",
            ModelKind::DecoderOnly => "dec",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

pub(crate) type ParamSpec = (String, Vec<usize>, Init);

fn layer_norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}.b"), vec![d], Init::Zeros));
}

fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    let std = 1.0 / (d as f64).sqrt();
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{p}"), vec![d, d], Init::Normal(std)));
    }
}

/// One pre-norm transformer layer, optionally with cross-attention.
pub(crate) fn layer_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, d_ff: usize, cross: bool) {
    layer_norm_specs(out, &format!("{prefix}.ln1"), d);
    attention_specs(out, &format!("{prefix}.attn"), d);
    if cross {
        layer_norm_specs(out, &format!("{prefix}.lnx"), d);
        attention_specs(out, &format!("{prefix}.cross"), d);
    }
    layer_norm_specs(out, &format!("{prefix}.ln2"), d);
    out.push((format!("{prefix}.ff.w1"), vec![d, d_ff], Init::Normal(1.0 / (d as f64).sqrt())));
    out.push((format!("{prefix}.ff.w2"), vec![d_ff, d], Init::Normal(1.0 / (d_ff as f64).sqrt())));
}

const EMBED_STD: f64 = 0.1;

fn stack_specs(out: &mut Vec<ParamSpec>, arch: &Architecture, prefix: &str, cross: bool) {
    let d = arch.d_model;
    out.push((format!("{prefix}.tok_emb"), vec![arch.vocab_size, d], Init::Normal(EMBED_STD)));
    out.push((format!("{prefix}.pos_emb"), vec![arch.max_len, d], Init::Normal(EMBED_STD)));
    for l in 0..arch.layers {
        layer_specs(out, &format!("{prefix}.{l}"), d, arch.d_ff, cross);
    }
    layer_norm_specs(out, &format!("{prefix}.ln_f"), d);
}

/// Parameter shapes of the base model, in initialization order.
pub(crate) fn base_specs(arch: &Architecture) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    match arch.kind {
        ModelKind::EncoderDecoder => {
            stack_specs(&mut out, arch, "enc", false);
            stack_specs(&mut out, arch, "dec", true);
        }
        ModelKind::DecoderOnly => stack_specs(&mut out, arch, "dec", false),
    }
    let std = 1.0 / (arch.d_model as f64).sqrt();
    out.push(("lm_head".into(), vec![arch.d_model, arch.vocab_size], Init::Normal(std)));
    out
}

/// Parameter shapes added by expansion number `index`.
pub(crate) fn expansion_specs(arch: &Architecture, index: usize, expansion: &Expansion) -> Vec<ParamSpec> {
    let d = arch.d_model;
    let mut out = Vec::new();
    match expansion {
        Expansion::Lora { rank, targets, .. } => {
            for t in targets {
                out.push((format!("x{index}.lora.{t}.a"), vec![d, *rank], Init::Normal(1.0 / (d as f64).sqrt())));
                out.push((format!("x{index}.lora.{t}.b"), vec![*rank, d], Init::Zeros));
            }
        }
        Expansion::KAdapter { layers } => {
            for i in 0..layers.len() {
                layer_specs(&mut out, &format!("x{index}.adapter.{i}"), d, arch.d_ff, false);
            }
            out.push((format!("x{index}.adapter.fuse"), vec![d, d], Init::Zeros));
        }
        Expansion::Modular {
            width,
            d_ff,
            layers,
            ..
        } => {
            let w = *width;
            out.push((format!("x{index}.modular.in"), vec![d, w], Init::Normal(1.0 / (d as f64).sqrt())));
            for l in 0..*layers {
                layer_specs(&mut out, &format!("x{index}.modular.{l}"), w, *d_ff, false);
            }
            layer_norm_specs(&mut out, &format!("x{index}.modular.ln_f"), w);
            out.push((format!("x{index}.modular.proj"), vec![w, d], Init::Zeros));
        }
    }
    out
}

pub(crate) fn materialize(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    specs
        .iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, *std).expect("positive std");
                    (0..n).map(|_| dist.sample(rng) as f32).collect()
                }
            };
            (name.clone(), Tensor::new(shape, data).expect("spec shapes are valid"))
        })
        .collect()
}

/// All parameters of one model plus its freeze mask and optional θ0 snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: Architecture,
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    theta0: Option<BTreeMap<String, Tensor>>,
}

impl ModelState {
    /// Freshly initialized base model (no expansions).
    pub fn init(mut arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        arch.expansions.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = materialize(&base_specs(&arch), &mut rng).into_iter().collect();
        Ok(Self {
            arch,
            params,
            frozen: BTreeSet::new(),
            theta0: None,
        })
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        params: BTreeMap<String, Tensor>,
        frozen: BTreeSet<String>,
        theta0: Option<BTreeMap<String, Tensor>>,
    ) -> Result<Self> {
        let state = Self {
            arch,
            params,
            frozen,
            theta0,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let mut expected = base_specs(&self.arch);
        for (i, x) in self.arch.expansions.iter().enumerate() {
            expected.extend(expansion_specs(&self.arch, i, x));
        }
        if expected.len() != self.params.len() {
            return Err(CklError::Checkpoint(format!(
                "architecture implies {} tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match self.params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(CklError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(CklError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if let Some(name) = self.frozen.iter().find(|n| !self.params.contains_key(*n)) {
            return Err(CklError::Checkpoint(format!("frozen name {name} is not a parameter")));
        }
        if let Some(theta0) = &self.theta0 {
            for (name, t) in theta0 {
                match self.params.get(name) {
                    Some(p) if p.shape() == t.shape() => {}
                    _ => return Err(CklError::Checkpoint(format!("theta0 entry {name} does not match"))),
                }
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn param_data_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.params.get_mut(name).map(|t| t.data_mut())
    }

    /// Overwrites a parameter's values. Test and tooling hook; shapes must match.
    pub fn set_param(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| CklError::Config(format!("no parameter {name}")))?;
        if t.numel() != data.len() {
            return Err(CklError::Config(format!("{name}: {} values for {} slots", data.len(), t.numel())));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(CklError::Config(format!("cannot freeze unknown parameter {name}")));
        }
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .map(String::as_str)
    }

    /// Snapshots every currently trainable parameter as θ0.
    pub fn snapshot_theta0(&mut self) {
        let snap = self
            .params
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        self.theta0 = Some(snap);
    }

    pub fn clear_theta0(&mut self) {
        self.theta0 = None;
    }

    pub fn theta0(&self) -> Option<&BTreeMap<String, Tensor>> {
        self.theta0.as_ref()
    }

    /// Appends an expansion and initializes its parameters (trainable).
    pub(crate) fn add_expansion(&mut self, expansion: Expansion, seed: u64) -> Result<usize> {
        let index = self.arch.expansions.len();
        let specs = expansion_specs(&self.arch, index, &expansion);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)));
        for (name, t) in materialize(&specs, &mut rng) {
            if self.params.insert(name.clone(), t).is_some() {
                return Err(CklError::Config(format!("expansion parameter {name} already exists")));
            }
        }
        self.arch.expansions.push(expansion);
        Ok(index)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}
