//! Pre-norm decoder-only transformer with a gating hook in every attention
//! layer, its parameter bookkeeping and its checkpoint format.

mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, Manifest, ManifestEntry, RngSnapshot};
pub use forward::{forward, AttnTrace, ForwardOptions, ForwardOutput, LayerTrace, ParamVars};

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateParams;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_gate: usize,
}

impl ModelConfig {
    /// Minutes-scale preset: 2 layers, d=64, 2 heads, d_gate=8, n=128.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_ff: 256,
            vocab_size: 256,
            seq_len: 128,
            d_gate: 8,
        }
    }

    /// The 6-layer, 256-wide, 4-head reference configuration with a 32-wide gate.
    pub fn reference() -> Self {
        ModelConfig {
            n_layers: 6,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            vocab_size: 50_257,
            seq_len: 512,
            d_gate: 32,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        Ok(())
    }

    /// Shapes of every model tensor in checkpoint order.
    pub fn layout(&self) -> Vec<(String, ParamKind, Option<usize>, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            (
                "tok_emb".to_string(),
                ParamKind::TokenEmbedding,
                None,
                vec![self.vocab_size, d],
            ),
            (
                "pos_emb".to_string(),
                ParamKind::PositionEmbedding,
                None,
                vec![self.seq_len, d],
            ),
        ];
        for l in 0..self.n_layers {
            for kind in ParamKind::PER_LAYER {
                let shape = match kind {
                    ParamKind::Query | ParamKind::Key | ParamKind::Value | ParamKind::Output => vec![d, d],
                    ParamKind::FfIn => vec![d, f],
                    ParamKind::FfInBias => vec![f],
                    ParamKind::FfOut => vec![f, d],
                    _ => vec![d],
                };
                out.push((format!("layers.{l}.{}", kind.suffix()), kind, Some(l), shape));
            }
        }
        out.push(("ln_f.gain".to_string(), ParamKind::FinalGain, None, vec![d]));
        out.push(("ln_f.bias".to_string(), ParamKind::FinalBias, None, vec![d]));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    TokenEmbedding,
    PositionEmbedding,
    Ln1Gain,
    Ln1Bias,
    Query,
    Key,
    Value,
    Output,
    Ln2Gain,
    Ln2Bias,
    FfIn,
    FfInBias,
    FfOut,
    FfOutBias,
    FinalGain,
    FinalBias,
}

impl ParamKind {
    pub const PER_LAYER: [ParamKind; 12] = [
        ParamKind::Ln1Gain,
        ParamKind::Ln1Bias,
        ParamKind::Query,
        ParamKind::Key,
        ParamKind::Value,
        ParamKind::Output,
        ParamKind::Ln2Gain,
        ParamKind::Ln2Bias,
        ParamKind::FfIn,
        ParamKind::FfInBias,
        ParamKind::FfOut,
        ParamKind::FfOutBias,
    ];

    fn suffix(self) -> &'static str {
        match self {
            ParamKind::Ln1Gain => "ln1.gain",
            ParamKind::Ln1Bias => "ln1.bias",
            ParamKind::Query => "attn.q",
            ParamKind::Key => "attn.k",
            ParamKind::Value => "attn.v",
            ParamKind::Output => "attn.o",
            ParamKind::Ln2Gain => "ln2.gain",
            ParamKind::Ln2Bias => "ln2.bias",
            ParamKind::FfIn => "ff.w_in",
            ParamKind::FfInBias => "ff.b_in",
            ParamKind::FfOut => "ff.w_out",
            ParamKind::FfOutBias => "ff.b_out",
            ParamKind::TokenEmbedding => "tok_emb",
            ParamKind::PositionEmbedding => "pos_emb",
            ParamKind::FinalGain => "ln_f.gain",
            ParamKind::FinalBias => "ln_f.bias",
        }
    }

    pub fn is_attention_projection(self) -> bool {
        matches!(
            self,
            ParamKind::Query | ParamKind::Key | ParamKind::Value | ParamKind::Output
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub layer: Option<usize>,
    pub value: Tensor,
    pub trainable: bool,
}

/// Every transformer weight. The output head is tied to `tok_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

impl ModelParams {
    /// Seeded initialization: embeddings `N(0, 0.02²)`, projections
    /// `N(0, 1/fan_in)` with residual outputs further scaled by
    /// `1/sqrt(2·n_layers)`, biases zero, norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x30de1);
        let resid = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let params = config
            .layout()
            .into_iter()
            .map(|(name, kind, layer, shape)| {
                let std = match kind {
                    ParamKind::TokenEmbedding | ParamKind::PositionEmbedding => 0.02,
                    ParamKind::Query | ParamKind::Key | ParamKind::Value | ParamKind::FfIn => {
                        1.0 / (shape[0] as f64).sqrt()
                    }
                    ParamKind::Output | ParamKind::FfOut => resid / (shape[0] as f64).sqrt(),
                    _ => 0.0,
                };
                let value = match kind {
                    ParamKind::Ln1Gain | ParamKind::Ln2Gain | ParamKind::FinalGain => Tensor::full(&shape, 1.0),
                    _ if std == 0.0 => Tensor::zeros(&shape),
                    _ => {
                        let normal = Normal::new(0.0, std).expect("finite std");
                        Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                    }
                };
                Param {
                    name,
                    kind,
                    layer,
                    value,
                    trainable: true,
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            params,
        })
    }

    pub fn index_of(&self, kind: ParamKind, layer: Option<usize>) -> usize {
        match (kind, layer) {
            (ParamKind::TokenEmbedding, _) => 0,
            (ParamKind::PositionEmbedding, _) => 1,
            (ParamKind::FinalGain, _) => 2 + 12 * self.config.n_layers,
            (ParamKind::FinalBias, _) => 3 + 12 * self.config.n_layers,
            (k, Some(l)) => {
                let pos = ParamKind::PER_LAYER
                    .iter()
                    .position(|&p| p == k)
                    .expect("per-layer kind");
                2 + 12 * l + pos
            }
            (k, None) => panic!("{k:?} needs a layer index"),
        }
    }

    pub fn get(&self, kind: ParamKind, layer: Option<usize>) -> &Tensor {
        &self.params[self.index_of(kind, layer)].value
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.value.bit_eq(&b.value))
    }

    pub fn any_trainable(&self) -> bool {
        self.params.iter().any(|p| p.trainable)
    }
}

/// Which parameter groups an optimizer step may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainSelector {
    All,
    None,
    GateOnly,
    /// Q/K/V/O of the listed layers only.
    AttnLayers(BTreeSet<usize>),
}

impl FromStr for TrainSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrainSelector::All),
            "none" => Ok(TrainSelector::None),
            "gate_only" => Ok(TrainSelector::GateOnly),
            _ => {
                let list = s
                    .strip_prefix("attn_layers:")
                    .ok_or_else(|| Error::Config(format!("unknown trainable group {s:?}")))?;
                let layers = list
                    .split(',')
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad layer index {t:?}")))
                    })
                    .collect::<Result<BTreeSet<_>>>()?;
                Ok(TrainSelector::AttnLayers(layers))
            }
        }
    }
}

/// Applies `selector` to the model and, when given, the gate.
///
/// `All` unfreezes the gate, `GateOnly` unfreezes only the gate, `None` and
/// `AttnLayers` leave the gate frozen.
pub fn set_trainable(params: &mut ModelParams, gates: Option<&mut GateParams>, selector: &TrainSelector) -> Result<()> {
    if let TrainSelector::AttnLayers(layers) = selector {
        if let Some(&bad) = layers.iter().find(|&&l| l >= params.config.n_layers) {
            return Err(Error::Config(format!(
                "layer {bad} out of range for {} layers",
                params.config.n_layers
            )));
        }
    }
    for p in &mut params.params {
        p.trainable = match selector {
            TrainSelector::All => true,
            TrainSelector::None | TrainSelector::GateOnly => false,
            TrainSelector::AttnLayers(layers) => {
                p.kind.is_attention_projection() && p.layer.is_some_and(|l| layers.contains(&l))
            }
        };
    }
    if let Some(g) = gates {
        g.frozen = !matches!(selector, TrainSelector::All | TrainSelector::GateOnly);
    }
    Ok(())
}

/// Closed-form parameter accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    /// `2 · n_layers · n_heads · d_model · d_gate`.
    pub gate_params: usize,
    /// `3 · d_model · n_heads · d_head` for one layer.
    pub qkv_params_per_layer: usize,
    pub attention_params_per_layer: usize,
    pub embedding_params: usize,
    /// All model weights with the output head tied to the token embedding.
    pub model_params: usize,
    pub model_params_with_gate: usize,
    /// Per-layer Q/K/V to gate ratio, `3·d_head / (2·d_gate)`.
    pub qkv_to_gate_ratio: Option<f64>,
    /// Whole model to gate ratio.
    pub model_to_gate_ratio: Option<f64>,
}

pub fn count_params(config: &ModelConfig) -> ParamReport {
    let (l, d, h, dh, f) = (
        config.n_layers,
        config.d_model,
        config.n_heads,
        config.d_head(),
        config.d_ff,
    );
    let gate_params = 2 * l * h * d * config.d_gate;
    let qkv = 3 * d * h * dh;
    let attention = qkv + d * d;
    let per_layer = attention + 2 * d * f + f + d + 4 * d;
    let embedding_params = config.vocab_size * d + config.seq_len * d;
    let model_params = embedding_params + l * per_layer + 2 * d;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    ParamReport {
        gate_params,
        qkv_params_per_layer: qkv,
        attention_params_per_layer: attention,
        embedding_params,
        model_params,
        model_params_with_gate: model_params + gate_params,
        qkv_to_gate_ratio: ratio(qkv, 2 * h * d * config.d_gate),
        model_to_gate_ratio: ratio(model_params, gate_params),
    }
}
