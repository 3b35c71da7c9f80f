//! File form of an experiment: strict JSON with `model`, `data`, `train`
//! and `protocol` sections. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TokenizerKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

const MAX_CONFIG_BYTES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Plain-text corpus. Without it a synthetic corpus is generated.
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub tokenizer: TokenizerKind,
    pub valid_fraction: f64,
    pub batch_size: usize,
    pub eval_batches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synthetic_bytes: 1_200_000,
            synthetic_seed: 0,
            tokenizer: TokenizerKind::Byte,
            valid_fraction: 0.1,
            batch_size: 16,
            eval_batches: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Peak learning rate of gate parameters; `lr` when absent.
    pub gate_lr: Option<f64>,
    pub warmup_frac: f64,
    pub min_lr_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub gate_weight_decay: f64,
    pub eval_interval: usize,
    /// Intermediate checkpoint cadence; `eval_interval` when absent. The
    /// final checkpoint is always written.
    pub checkpoint_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            gate_lr: None,
            warmup_frac: 0.02,
            min_lr_frac: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            gate_weight_decay: 0.0,
            eval_interval: 200,
            checkpoint_interval: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    E1Soft,
    E2Hard,
    E3Contrast,
    E4Stochastic,
    GateOnly,
    PosthocDistill,
    AbsorptionGradient,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::E1Soft => "e1_soft",
            Protocol::E2Hard => "e2_hard",
            Protocol::E3Contrast => "e3_contrast",
            Protocol::E4Stochastic => "e4_stochastic",
            Protocol::GateOnly => "gate_only",
            Protocol::PosthocDistill => "posthoc_distill",
            Protocol::AbsorptionGradient => "absorption_gradient",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillObjective {
    #[default]
    Kl,
    Bce,
}

/// Which layers the absorption sweep unfreezes first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnfreezeOrder {
    #[default]
    Last,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub name: Protocol,
    #[serde(default = "default_k")]
    pub k: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// E3: `[dense, soft_gated]`. GATE_ONLY, POSTHOC_DISTILL and
    /// ABSORPTION_GRADIENT: `[dense]`. E1 and E4 may name a starting point.
    #[serde(default)]
    pub source_checkpoints: Vec<PathBuf>,
    #[serde(default)]
    pub objective: DistillObjective,
    /// Deployment budgets evaluated by POSTHOC_DISTILL; `[k]` when empty.
    #[serde(default)]
    pub k_list: Vec<usize>,
    /// Seeds of the fixed random masks used for evaluation.
    #[serde(default = "default_mask_seeds")]
    pub mask_seeds: Vec<u64>,
    /// ABSORPTION_GRADIENT sweep; `0..=n_layers` when empty.
    #[serde(default)]
    pub n_unfrozen: Vec<usize>,
    #[serde(default)]
    pub unfreeze: UnfreezeOrder,
    #[serde(default = "yes")]
    pub no_gate_control: bool,
    /// E1 and E4 also train a dense baseline of equal budget.
    #[serde(default = "yes")]
    pub dense_baseline: bool,
}

fn default_k() -> usize {
    16
}

fn default_mask_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn yes() -> bool {
    true
}

impl ProtocolConfig {
    pub fn new(name: Protocol, seeds: Vec<u64>, steps: usize) -> Self {
        ProtocolConfig {
            name,
            k: default_k(),
            seeds,
            steps,
            source_checkpoints: Vec::new(),
            objective: DistillObjective::Kl,
            k_list: Vec::new(),
            mask_seeds: default_mask_seeds(),
            n_unfrozen: Vec::new(),
            unfreeze: UnfreezeOrder::Last,
            no_gate_control: true,
            dense_baseline: true,
        }
    }

    pub fn k_values(&self) -> Vec<usize> {
        if self.k_list.is_empty() {
            vec![self.k]
        } else {
            self.k_list.clone()
        }
    }
}

impl RunConfig {
    pub fn new(protocol: ProtocolConfig) -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            protocol,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        if bytes.len() > MAX_CONFIG_BYTES {
            return Err(Error::Config("config file larger than 1 MiB".into()));
        }
        let cfg: RunConfig = serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        if d.batch_size == 0 || d.eval_batches == 0 {
            return bad("batch_size and eval_batches must be positive".into());
        }
        if !(0.0..1.0).contains(&d.valid_fraction) || d.valid_fraction == 0.0 {
            return bad(format!("valid_fraction {} outside (0, 1)", d.valid_fraction));
        }
        if d.path.is_none() && d.tokenizer != TokenizerKind::Byte {
            return bad("the synthetic corpus uses the byte tokenizer".into());
        }
        let t = &self.train;
        let positive = [t.lr, t.gate_lr.unwrap_or(t.lr), t.eps];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return bad("lr, gate_lr and eps must be positive".into());
        }
        for (name, v) in [
            ("warmup_frac", t.warmup_frac),
            ("min_lr_frac", t.min_lr_frac),
            ("beta1", t.beta1),
            ("beta2", t.beta2),
        ] {
            if !(0.0..=1.0).contains(&v) || (name.starts_with("beta") && v == 1.0) {
                return bad(format!("{name} = {v} out of range"));
            }
        }
        if t.weight_decay < 0.0 || t.gate_weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        if t.eval_interval == 0 || t.checkpoint_interval == Some(0) {
            return bad("eval_interval and checkpoint_interval must be positive".into());
        }

        let p = &self.protocol;
        if p.seeds.is_empty() {
            return bad("protocol.seeds must not be empty".into());
        }
        let mut seeds = p.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != p.seeds.len() {
            return bad("protocol.seeds contains duplicates".into());
        }
        if p.k == 0 || p.k_list.contains(&0) {
            return bad("k must be >= 1".into());
        }
        let sources = p.source_checkpoints.len();
        let need = match p.name {
            Protocol::E3Contrast => Some(2),
            Protocol::GateOnly | Protocol::PosthocDistill | Protocol::AbsorptionGradient => Some(1),
            Protocol::E1Soft | Protocol::E4Stochastic => (sources > 1).then_some(1),
            Protocol::E2Hard => (sources > 0).then_some(0),
        };
        if let Some(n) = need {
            if sources != n {
                return bad(format!("{} needs {n} source checkpoint(s), got {sources}", p.name));
            }
        }
        if matches!(
            p.name,
            Protocol::E4Stochastic | Protocol::GateOnly | Protocol::PosthocDistill
        ) && p.mask_seeds.is_empty()
        {
            return bad("mask_seeds must not be empty".into());
        }
        if let Some(&n) = p.n_unfrozen.iter().find(|&&n| n > self.model.n_layers) {
            return bad(format!("n_unfrozen {n} exceeds n_layers {}", self.model.n_layers));
        }
        Ok(())
    }
}
