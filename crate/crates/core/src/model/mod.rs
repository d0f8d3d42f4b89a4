//! Transformer variants over the token-typed sample layout.
//!
//! All variants share GPT-2 conventions: pre-norm blocks, learned absolute
//! positions, GELU MLPs and an output head tied to the token embedding.
//!
//! * [`Variant::Dec`]: one causal decoder over references + conversation.
//! * [`Variant::Nrc`]: the same decoder fed only the conversation.
//! * [`Variant::S2s`]: bidirectional encoder over the references, causal
//!   decoder with cross-attention over the conversation.
//! * [`Variant::Vae`]: bidirectional encoder whose CLS state parameterizes
//!   a Gaussian latent; the sampled latent is prepended to the decoder input.

mod forward;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::TokenType;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub use forward::{forward, next_token_logits, prediction_targets, Forward, ForwardOptions, LatentNoise};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample of {len} tokens exceeds max_positions {max}; truncate the context")]
    TooLong { len: usize, max: usize },
    #[error("{0}")]
    Input(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Dec,
    S2s,
    Vae,
    Nrc,
}

impl Variant {
    pub fn uses_references(self) -> bool {
        self != Variant::Nrc
    }

    pub fn has_encoder(self) -> bool {
        matches!(self, Variant::S2s | Variant::Vae)
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dec" => Ok(Variant::Dec),
            "s2s" => Ok(Variant::S2s),
            "vae" => Ok(Variant::Vae),
            "nrc" => Ok(Variant::Nrc),
            other => Err(ModelError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// Latent width, VAE only.
    #[serde(default)]
    pub latent_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_type_vocab() -> usize {
    TokenType::COUNT
}

fn default_max_positions() -> usize {
    1024
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    pub fn new(variant: Variant, hidden_size: usize, num_layers: usize, num_heads: usize, vocab_size: usize) -> Self {
        Self {
            variant,
            hidden_size,
            num_layers,
            num_heads,
            vocab_size,
            type_vocab: default_type_vocab(),
            max_positions: default_max_positions(),
            latent_dim: if variant == Variant::Vae { hidden_size } else { 0 },
            mlp_ratio: default_mlp_ratio(),
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.hidden_size == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return err("hidden_size, num_layers and num_heads must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return err(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.mlp_ratio == 0 {
            return err("vocab_size, max_positions and mlp_ratio must be positive".into());
        }
        if self.type_vocab < TokenType::COUNT {
            return err(format!("type_vocab must be at least {}", TokenType::COUNT));
        }
        if self.variant == Variant::Vae && self.latent_dim == 0 {
            return err("VAE needs latent_dim > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    SelfOnly,
    WithCross,
}

fn block_specs(prefix: &str, cfg: &ModelConfig, kind: BlockKind, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let h = cfg.hidden_size;
    let m = cfg.mlp_ratio * h;
    let resid = Init::Normal(INIT_STD / (2.0 * cfg.num_layers as f64).sqrt());
    let mut add = |name: &str, shape: Vec<usize>, init: Init| out.push((format!("{prefix}.{name}"), shape, init));
    add("ln1.g", vec![h], Init::Ones);
    add("ln1.b", vec![h], Init::Zeros);
    add("attn.qkv.w", vec![h, 3 * h], Init::Normal(INIT_STD));
    add("attn.qkv.b", vec![3 * h], Init::Zeros);
    add("attn.proj.w", vec![h, h], resid);
    add("attn.proj.b", vec![h], Init::Zeros);
    if kind == BlockKind::WithCross {
        add("lnx.g", vec![h], Init::Ones);
        add("lnx.b", vec![h], Init::Zeros);
        add("xattn.q.w", vec![h, h], Init::Normal(INIT_STD));
        add("xattn.q.b", vec![h], Init::Zeros);
        add("xattn.kv.w", vec![h, 2 * h], Init::Normal(INIT_STD));
        add("xattn.kv.b", vec![2 * h], Init::Zeros);
        add("xattn.proj.w", vec![h, h], resid);
        add("xattn.proj.b", vec![h], Init::Zeros);
    }
    add("ln2.g", vec![h], Init::Ones);
    add("ln2.b", vec![h], Init::Zeros);
    add("mlp.fc.w", vec![h, m], Init::Normal(INIT_STD));
    add("mlp.fc.b", vec![m], Init::Zeros);
    add("mlp.proj.w", vec![m, h], resid);
    add("mlp.proj.b", vec![h], Init::Zeros);
}

/// Every learned tensor, in allocation order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.hidden_size;
    let mut specs = vec![
        ("wte".to_string(), vec![cfg.vocab_size, h], Init::Normal(INIT_STD)),
        ("wtt".to_string(), vec![cfg.type_vocab, h], Init::Normal(INIT_STD)),
        ("wpe".to_string(), vec![cfg.max_positions, h], Init::Normal(INIT_STD)),
    ];
    let final_norm = |prefix: &str, specs: &mut Vec<(String, Vec<usize>, Init)>| {
        specs.push((format!("{prefix}ln_f.g"), vec![h], Init::Ones));
        specs.push((format!("{prefix}ln_f.b"), vec![h], Init::Zeros));
    };
    if cfg.variant.has_encoder() {
        for i in 0..cfg.num_layers {
            block_specs(&format!("enc.{i}"), cfg, BlockKind::SelfOnly, &mut specs);
        }
        final_norm("enc.", &mut specs);
    }
    if cfg.variant == Variant::Vae {
        let z = cfg.latent_dim;
        specs.push(("vae.cls".into(), vec![1, h], Init::Normal(INIT_STD)));
        specs.push(("vae.stats.w".into(), vec![h, 2 * z], Init::Normal(INIT_STD)));
        specs.push(("vae.stats.b".into(), vec![2 * z], Init::Zeros));
        specs.push(("vae.latent.w".into(), vec![z, h], Init::Normal(INIT_STD)));
        specs.push(("vae.latent.b".into(), vec![h], Init::Zeros));
    }
    let kind = if cfg.variant == Variant::S2s {
        BlockKind::WithCross
    } else {
        BlockKind::SelfOnly
    };
    for i in 0..cfg.num_layers {
        block_specs(&format!("dec.{i}"), cfg, kind, &mut specs);
    }
    final_norm("", &mut specs);
    specs
}

/// Learned scalar count in closed form (head tied to `wte`).
pub fn count_params(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden_size;
    let m = cfg.mlp_ratio;
    let l = cfg.num_layers;
    let embeddings = (cfg.vocab_size + cfg.type_vocab + cfg.max_positions) * h;
    let block = (4 + 2 * m) * h * h + (9 + m) * h;
    let cross = 4 * h * h + 6 * h;
    let norm = 2 * h;
    match cfg.variant {
        Variant::Dec | Variant::Nrc => embeddings + l * block + norm,
        Variant::S2s => embeddings + (l * block + norm) + (l * (block + cross) + norm),
        Variant::Vae => {
            let z = cfg.latent_dim;
            let latent = h + (h * 2 * z + 2 * z) + (z * h + h);
            embeddings + 2 * (l * block + norm) + latent
        }
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TransformerParams<T> {
    /// Normal(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2 * num_layers)`, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in param_specs(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn cast<U: Scalar>(&self) -> TransformerParams<U> {
        TransformerParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the tensor set matches `cfg` exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in specs {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places every tensor on `graph`, trainable or constant.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles of a bound parameter set.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds explicit graph handles by parameter name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
