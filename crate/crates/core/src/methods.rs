//! Continual-learning method families: freeze policies, LoRA, K-Adapter,
//! Modular, Mix-Review replay quotas and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};
use crate::model::{Expansion, ModelKind, ModelState};
use crate::optim::RecAdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub scaling: f32,
    /// Self-attention projections to wrap.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            scaling: 1.0,
            targets: vec!["q".into(), "v".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KAdapterConfig {
    pub k: usize,
    /// Attachment layers; evenly spaced when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

impl Default for KAdapterConfig {
    fn default() -> Self {
        Self { k: 2, layers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModularConfig {
    pub width: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
}

impl Default for ModularConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 2,
            d_ff: 64,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixReviewConfig {
    pub mix_ratio: f64,
    pub mix_decay: f64,
}

impl Default for MixReviewConfig {
    fn default() -> Self {
        Self {
            mix_ratio: 0.7,
            mix_decay: 4.0,
        }
    }
}

/// One method with its own sub-configuration. Serialized as
/// `{"kind": "lora", "lora": {...}}`; sub-configs default when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodConfig {
    Initial,
    Vanilla,
    Recadam {
        #[serde(default)]
        recadam: RecAdamConfig,
    },
    Mixreview {
        #[serde(default)]
        mixreview: MixReviewConfig,
    },
    Lora {
        #[serde(default)]
        lora: LoraConfig,
    },
    Kadapter {
        #[serde(default)]
        kadapter: KAdapterConfig,
    },
    Modular {
        #[serde(default)]
        modular: ModularConfig,
    },
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Initial => "initial",
            MethodConfig::Vanilla => "vanilla",
            MethodConfig::Recadam { .. } => "recadam",
            MethodConfig::Mixreview { .. } => "mixreview",
            MethodConfig::Lora { .. } => "lora",
            MethodConfig::Kadapter { .. } => "kadapter",
            MethodConfig::Modular { .. } => "modular",
        }
    }

    /// Method with default hyperparameters, by CLI name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "initial" => MethodConfig::Initial,
            "vanilla" => MethodConfig::Vanilla,
            "recadam" => MethodConfig::Recadam {
                recadam: RecAdamConfig::default(),
            },
            "mixreview" => MethodConfig::Mixreview {
                mixreview: MixReviewConfig::default(),
            },
            "lora" => MethodConfig::Lora {
                lora: LoraConfig::default(),
            },
            "kadapter" => MethodConfig::Kadapter {
                kadapter: KAdapterConfig::default(),
            },
            "modular" => MethodConfig::Modular {
                modular: ModularConfig::default(),
            },
            other => return Err(CklError::Config(format!("unknown method {other:?}"))),
        })
    }

    pub fn is_expansion(&self) -> bool {
        matches!(
            self,
            MethodConfig::Lora { .. } | MethodConfig::Kadapter { .. } | MethodConfig::Modular { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CklError::Config(m));
        match self {
            MethodConfig::Initial | MethodConfig::Vanilla => Ok(()),
            MethodConfig::Recadam { recadam } => recadam.validate(),
            MethodConfig::Mixreview { mixreview: m } => {
                if !(m.mix_ratio > 0.0 && m.mix_ratio <= 1.0) {
                    return bad(format!("mix_ratio {} outside (0, 1]", m.mix_ratio));
                }
                if !(m.mix_decay > 1.0) {
                    return bad(format!("mix_decay {} must exceed 1", m.mix_decay));
                }
                Ok(())
            }
            MethodConfig::Lora { lora } => {
                if lora.rank == 0 {
                    return bad("LoRA rank must be at least 1".into());
                }
                if lora.targets.is_empty() || lora.targets.iter().any(|t| !["q", "k", "v", "o"].contains(&t.as_str())) {
                    return bad(format!("LoRA targets {:?} must be attention projections", lora.targets));
                }
                Ok(())
            }
            MethodConfig::Kadapter { kadapter } => {
                if kadapter.k == 0 {
                    return bad("K-Adapter needs k >= 1".into());
                }
                if let Some(layers) = &kadapter.layers {
                    if layers.len() != kadapter.k {
                        return bad(format!("{} attachment layers given for k = {}", layers.len(), kadapter.k));
                    }
                }
                Ok(())
            }
            MethodConfig::Modular { modular: m } => {
                if m.width == 0 || m.heads == 0 || m.d_ff == 0 || m.layers == 0 || m.width % m.heads != 0 {
                    return bad(format!("invalid modular encoder {m:?}"));
                }
                Ok(())
            }
        }
    }
}

fn expansion_index(name: &str) -> Option<usize> {
    name.strip_prefix('x')?.split('.').next()?.parse().ok()
}

/// Sets the frozen mask for `config`. Base parameters follow the method's
/// policy; the newest expansion is trainable and older ones stay frozen.
pub fn apply_freeze_policy(model: &mut ModelState, config: &MethodConfig) -> Result<()> {
    let kind = model.arch().kind;
    let base_frozen: fn(&str) -> bool = match (config, kind) {
        (MethodConfig::Initial, _) => {
            return Err(CklError::Config("the initial stage does not train, so it has no freeze policy".into()))
        }
        (MethodConfig::Vanilla | MethodConfig::Recadam { .. } | MethodConfig::Mixreview { .. }, _) => |_| false,
        (_, ModelKind::EncoderDecoder) => |n| n.starts_with("enc."),
        (MethodConfig::Modular { .. }, ModelKind::DecoderOnly) => {
            return Err(CklError::Config("modular needs an encoder-decoder model".into()))
        }
        (_, ModelKind::DecoderOnly) => |_| true,
    };
    let newest = model.arch().expansions.len().checked_sub(1);
    let names: Vec<String> = model.names().map(str::to_string).collect();
    for name in names {
        let frozen = match expansion_index(&name) {
            Some(i) => Some(i) != newest || !config.is_expansion(),
            None => base_frozen(&name),
        };
        model.set_frozen(&name, frozen)?;
    }
    Ok(())
}

/// Names of the self-attention projections LoRA wraps: those in the scope
/// the freeze policy locks (the encoder, or the whole decoder-only stack).
pub fn lora_target_names(model: &ModelState, config: &LoraConfig) -> Vec<String> {
    let arch = model.arch();
    let stack = arch.main_stack();
    (0..arch.layers)
        .flat_map(|l| config.targets.iter().map(move |t| format!("{stack}.{l}.attn.{t}")))
        .collect()
}

/// Adds rank-`r` pairs with zero up-projections. Returns the expansion index.
pub fn lora_wrap(model: &mut ModelState, config: &LoraConfig, seed: u64) -> Result<usize> {
    let d = model.arch().d_model;
    if config.rank == 0 || config.rank >= d {
        return Err(CklError::Config(format!("LoRA rank {} must be in 1..{d}", config.rank)));
    }
    let targets = lora_target_names(model, config);
    model.add_expansion(
        Expansion::Lora {
            rank: config.rank,
            scaling: config.scaling,
            targets,
        },
        seed,
    )
}

/// Evenly spaced attachment layers: adapter `i` reads layer `⌊(i+1)L/k⌋ − 1`.
pub fn kadapter_layers(num_layers: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| (i + 1) * num_layers / k - 1).collect()
}

pub fn kadapter_attach(model: &mut ModelState, config: &KAdapterConfig, seed: u64) -> Result<usize> {
    let num_layers = model.arch().layers;
    if config.k == 0 {
        return Err(CklError::Config("K-Adapter needs k >= 1".into()));
    }
    if config.k > num_layers {
        return Err(CklError::Config(format!(
            "K-Adapter k = {} exceeds the {num_layers} layers of the main stack",
            config.k
        )));
    }
    let layers = match &config.layers {
        Some(l) if l.len() != config.k || l.iter().any(|&x| x >= num_layers) => {
            return Err(CklError::Config(format!("bad attachment layers {l:?}")))
        }
        Some(l) => l.clone(),
        None => kadapter_layers(num_layers, config.k),
    };
    model.add_expansion(Expansion::KAdapter { layers }, seed)
}

pub fn modular_attach(model: &mut ModelState, config: &ModularConfig, seed: u64) -> Result<usize> {
    if model.arch().kind != ModelKind::EncoderDecoder {
        return Err(CklError::Config("modular needs an encoder-decoder model".into()));
    }
    MethodConfig::Modular { modular: config.clone() }.validate()?;
    model.add_expansion(
        Expansion::Modular {
            width: config.width,
            heads: config.heads,
            d_ff: config.d_ff,
            layers: config.layers,
        },
        seed,
    )
}

/// Attaches the method's expansion (if any) and applies its freeze policy.
pub fn prepare_method(model: &mut ModelState, config: &MethodConfig, seed: u64) -> Result<()> {
    config.validate()?;
    match config {
        MethodConfig::Lora { lora } => {
            lora_wrap(model, lora, seed)?;
        }
        MethodConfig::Kadapter { kadapter } => {
            kadapter_attach(model, kadapter, seed)?;
        }
        MethodConfig::Modular { modular } => {
            modular_attach(model, modular, seed)?;
        }
        _ => {}
    }
    apply_freeze_policy(model, config)
}

/// Replay examples mixed into a batch at `epoch`: `⌊batch · ratio · decay^(−epoch)⌋`.
pub fn mixreview_quota(epoch: usize, new_batch_size: usize, config: &MixReviewConfig) -> usize {
    let exact = new_batch_size as f64 * config.mix_ratio / config.mix_decay.powi(epoch.min(i32::MAX as usize) as i32);
    // Absorb representation error so products like 60 · 0.7 land on 42.
    (exact + 1e-9).floor() as usize
}

/// `(trainable, total)` scalar parameter counts.
pub fn trainable_param_count(model: &ModelState) -> (usize, usize) {
    (model.trainable_count(), model.param_count())
}
