//! Checkpoint directory: `manifest.json` plus `tensors.bin`.
//!
//! `tensors.bin` holds every tensor as little-endian `f64`, concatenated in
//! manifest order. Each manifest entry records `name`, `shape`, `dtype`
//! (always `"f64"`), `byte_offset` and `byte_len`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Param};
use crate::error::{Error, Result};
use crate::gating::GateParams;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const FORMAT: &str = "absorbkit-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

/// Resumable position of a `ChaCha8Rng`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngSnapshot {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Format(format!("rng snapshot: {m}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub gate_frozen: Option<bool>,
    #[serde(default)]
    pub rng: Option<RngSnapshot>,
}

/// Model weights, optional gate weights and optional RNG position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub gates: Option<GateParams>,
    pub rng: Option<RngSnapshot>,
}

impl Checkpoint {
    pub fn new(model: ModelParams, gates: Option<GateParams>) -> Self {
        Checkpoint {
            model,
            gates,
            rng: None,
        }
    }

    /// Serializes to `(manifest.json bytes, tensors.bin bytes)`.
    pub fn to_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let mut named: Vec<(&str, &Tensor)> = self.model.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        let gate_named = self.gates.as_ref().map(|g| g.named_tensors()).unwrap_or_default();
        named.extend(gate_named.iter().map(|(n, t)| (n.as_str(), *t)));

        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(named.len());
        for (name, t) in named {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                byte_offset: offset,
                byte_len: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.model.config.clone(),
            entries,
            gate_frozen: self.gates.as_ref().map(|g| g.frozen),
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        (json, blob)
    }

    /// Parses and validates a checkpoint. Every entry must match the layout
    /// implied by the manifest's config, and byte ranges must tile the blob.
    pub fn from_bytes(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(manifest)?;
        let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
        if manifest.format != FORMAT {
            return Err(bad(format!("unsupported format {:?}", manifest.format)));
        }
        let cfg = &manifest.config;
        cfg.validate()?;
        let gated = manifest.gate_frozen.is_some();
        let model_entries = cfg
            .n_layers
            .checked_mul(12)
            .and_then(|v| v.checked_add(4))
            .ok_or_else(|| bad("layer count overflows".into()))?;
        let gate_entries = if gated { cfg.n_layers.saturating_mul(2) } else { 0 };
        if model_entries.checked_add(gate_entries) != Some(manifest.entries.len()) {
            return Err(bad(format!(
                "expected {} entries, found {}",
                model_entries.saturating_add(gate_entries),
                manifest.entries.len()
            )));
        }
        if gated && cfg.d_gate == 0 {
            return Err(bad("gate entries with d_gate = 0".into()));
        }

        let mut cursor = 0u64;
        let mut read = |entry: &ManifestEntry, name: &str, shape: &[usize]| -> Result<Tensor> {
            if entry.name != name || entry.shape != shape || entry.dtype != "f64" {
                return Err(bad(format!(
                    "entry {:?} does not match expected {name} {shape:?}",
                    entry.name
                )));
            }
            let numel = shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|v| v.checked_mul(8))
                .ok_or_else(|| bad(format!("{name}: size overflows")))?;
            if entry.byte_offset != cursor || entry.byte_len != numel {
                return Err(bad(format!("{name}: byte range does not follow the previous entry")));
            }
            let end = cursor
                .checked_add(numel)
                .filter(|&e| e <= blob.len() as u64)
                .ok_or_else(|| bad(format!("{name}: byte range past end of tensors.bin")))?;
            let bytes = &blob[cursor as usize..end as usize];
            cursor = end;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };

        let mut entries = manifest.entries.iter();
        let mut params = Vec::with_capacity(model_entries);
        let layout = LazyLayout::new(cfg);
        for (name, kind, layer, shape) in layout {
            let entry = entries.next().expect("entry count checked");
            let value = read(entry, &name, &shape)?;
            params.push(Param {
                name,
                kind,
                layer,
                value,
                trainable: true,
            });
        }
        let gates = if gated {
            let width = cfg
                .n_heads
                .checked_mul(cfg.d_gate)
                .ok_or_else(|| bad("gate width overflows".into()))?;
            let mut query = Vec::new();
            let mut key = Vec::new();
            for l in 0..cfg.n_layers {
                let qe = entries.next().expect("entry count checked");
                query.push(read(qe, &format!("gate.{l}.query"), &[cfg.d_model, width])?);
                let ke = entries.next().expect("entry count checked");
                key.push(read(ke, &format!("gate.{l}.key"), &[cfg.d_model, width])?);
            }
            Some(GateParams {
                n_layers: cfg.n_layers,
                n_heads: cfg.n_heads,
                d_model: cfg.d_model,
                d_gate: cfg.d_gate,
                query,
                key,
                frozen: manifest.gate_frozen.unwrap_or(false),
            })
        } else {
            None
        };
        if cursor != blob.len() as u64 {
            return Err(bad("trailing bytes in tensors.bin".into()));
        }
        Ok(Checkpoint {
            model: ModelParams {
                config: cfg.clone(),
                params,
            },
            gates,
            rng: manifest.rng,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.to_bytes();
        let mp = dir.join(MANIFEST_FILE);
        fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
        let tp = dir.join(TENSORS_FILE);
        fs::write(&tp, blob).map_err(|e| Error::io(&tp, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let manifest = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let tp = dir.join(TENSORS_FILE);
        let blob = fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
        Self::from_bytes(&manifest, &blob)
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.model.config == other.model.config
            && self.model.bit_eq(&other.model)
            && match (&self.gates, &other.gates) {
                (None, None) => true,
                (Some(a), Some(b)) => a.frozen == b.frozen && a.bit_eq(b),
                _ => false,
            }
            && self.rng == other.rng
    }
}

/// `ModelConfig::layout` without materializing it up front, so a hostile
/// manifest with a huge layer count fails on its first mismatched entry
/// instead of allocating.
struct LazyLayout<'a> {
    cfg: &'a ModelConfig,
    next: usize,
    total: usize,
}

impl<'a> LazyLayout<'a> {
    fn new(cfg: &'a ModelConfig) -> Self {
        LazyLayout {
            cfg,
            next: 0,
            total: 12 * cfg.n_layers + 4,
        }
    }
}

impl Iterator for LazyLayout<'_> {
    type Item = (String, super::ParamKind, Option<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let c = self.cfg;
        let one_layer = ModelConfig {
            n_layers: 1,
            ..c.clone()
        };
        let template = one_layer.layout();
        let item = match i {
            0 | 1 => template[i].clone(),
            _ if i >= self.total - 2 => template[template.len() - (self.total - i)].clone(),
            _ => {
                let (l, j) = ((i - 2) / 12, (i - 2) % 12);
                let (_, kind, _, shape) = template[2 + j].clone();
                let name = template[2 + j].0.replacen("layers.0.", &format!("layers.{l}."), 1);
                (name, kind, Some(l), shape)
            }
        };
        Some(item)
    }
}
