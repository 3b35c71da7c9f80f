//! Losses and evaluation metrics over attention tensors `[..., n, n]`.
//!
//! Every attention statistic treats the trailing two axes as (query, key)
//! and only looks at the causally valid keys `0..=q` of row `q`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{topk_mask, Mask};
use crate::tensor::{Tape, Tensor, Var};

fn square_rows(op: &'static str, t: &Tensor) -> Result<usize> {
    let s = t.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    Ok(s[s.len() - 1])
}

/// `exp` of the mean next-token cross-entropy (nats) of `logits[..., V]`.
pub fn perplexity(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(mean_nll(logits, targets)?.exp())
}

/// Mean negative log-likelihood in nats.
pub fn mean_nll(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let v = logits.last_dim();
    let rows = logits.numel() / v;
    if rows != targets.len() {
        return Err(Error::Shape {
            op: "perplexity",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::Index { index: t, extent: v });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / rows as f64)
}

/// Mean over rows of the probability mass held by the `min(k, q+1)` largest
/// causally valid entries.
pub fn topk_mass(p: &Tensor, k: usize) -> Result<f64> {
    let n = square_rows("topk_mass", p)?;
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let mut buf = Vec::with_capacity(n);
    let mut total = 0.0;
    let rows = p.numel() / n;
    for (r, row) in p.data().chunks(n).enumerate() {
        let q = r % n;
        let take = k.min(q + 1);
        buf.clear();
        buf.extend_from_slice(&row[..=q]);
        if take < buf.len() {
            buf.select_nth_unstable_by(take - 1, |a, b| b.total_cmp(a));
        }
        total += buf[..take].iter().sum::<f64>();
    }
    Ok(total / rows as f64)
}

/// Mean over rows of `H(row) / ln(q+1)`. Row 0 (a single valid key) is
/// excluded because its maximum entropy is zero.
pub fn entropy_ratio(p: &Tensor) -> Result<f64> {
    let n = square_rows("entropy_ratio", p)?;
    let (mut total, mut count) = (0.0, 0usize);
    for (r, row) in p.data().chunks(n).enumerate() {
        let q = r % n;
        if q == 0 {
            continue;
        }
        let h: f64 = row[..=q].iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
        total += h / ((q + 1) as f64).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("entropy_ratio needs rows wider than one key".into()));
    }
    Ok(total / count as f64)
}

/// Overlap of two top-k selections per row, pooled over rows:
/// `sum |top_k(G) ∩ top_k(P)| / sum min(k, q+1)`.
///
/// Both selections have the same size in every row, so per-row precision,
/// recall and F1 coincide and pooling gives the micro average.
pub fn gate_f1(g: &Tensor, teacher: &Tensor, k: usize) -> Result<f64> {
    let (hit, total) = f1_counts(g, teacher, k)?;
    Ok(hit as f64 / total as f64)
}

/// Per-row F1 values in row-major order.
pub fn gate_f1_rows(g: &Tensor, teacher: &Tensor, k: usize) -> Result<Vec<f64>> {
    let (a, b) = pair_masks(g, teacher, k)?;
    let n = a.seq_len();
    Ok(a.keep()
        .chunks(n)
        .zip(b.keep().chunks(n))
        .enumerate()
        .map(|(r, (x, y))| {
            let hit = x.iter().zip(y).filter(|(u, v)| **u && **v).count();
            hit as f64 / k.min(r % n + 1) as f64
        })
        .collect())
}

/// `(matched, selected)` counts behind [`gate_f1`], for pooling across layers.
pub fn f1_counts(g: &Tensor, teacher: &Tensor, k: usize) -> Result<(usize, usize)> {
    let (a, b) = pair_masks(g, teacher, k)?;
    let hit = a.keep().iter().zip(b.keep()).filter(|(x, y)| **x && **y).count();
    let total = a.row_counts().iter().sum();
    Ok((hit, total))
}

fn pair_masks(g: &Tensor, teacher: &Tensor, k: usize) -> Result<(Mask, Mask)> {
    if g.shape() != teacher.shape() {
        return Err(Error::Shape {
            op: "gate_f1",
            lhs: g.shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    Ok((topk_mask(g, k)?, topk_mask(teacher, k)?))
}

/// Lower-triangular validity flags for one `n × n` block.
pub fn causal_flags(n: usize) -> Vec<bool> {
    Mask::causal(n).keep().to_vec()
}

/// Mean over rows of `KL(teacher_row || softmax(g_row))` restricted to valid
/// keys. The teacher is a detached value, so gradient reaches only `g`.
pub fn kl_distill_loss(tape: &mut Tape, teacher: &Tensor, g: Var) -> Result<Var> {
    let n = square_rows("kl_distill_loss", teacher)?;
    if tape.value(g).shape() != teacher.shape() {
        return Err(Error::Shape {
            op: "kl_distill_loss",
            lhs: tape.value(g).shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    tape.kl_rows(teacher.data(), g, &causal_flags(n))
}

/// Mean binary cross-entropy between `sigmoid(g)` and the 0/1 `oracle` over
/// the causally valid positions.
pub fn bce_distill_loss(tape: &mut Tape, g: Var, oracle: &Mask) -> Result<Var> {
    if tape.value(g).shape() != oracle.shape() {
        return Err(Error::Shape {
            op: "bce_distill_loss",
            lhs: tape.value(g).shape().to_vec(),
            rhs: oracle.shape().to_vec(),
        });
    }
    tape.bce_with_logits(g, &oracle.to_f64(), &causal_flags(oracle.seq_len()))
}

/// Share of the random-to-oracle perplexity gap closed by the gate:
/// `(random - gate) / (random - oracle)`, unclamped. `None` when the gap is
/// below `1e-9` and the ratio is undefined.
pub fn efficiency(ppl_gate: f64, ppl_random: f64, ppl_oracle: f64) -> Option<f64> {
    let denom = ppl_random - ppl_oracle;
    if denom.abs() < 1e-9 || !denom.is_finite() {
        return None;
    }
    Some((ppl_random - ppl_gate) / denom)
}

/// One evaluation point of one arm of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub protocol: String,
    pub arm: String,
    pub seed: u64,
    pub step: usize,
    pub k: usize,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub gate_grad_norm: Option<f64>,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub gate_f1: Option<f64>,
    pub topk_mass: Vec<f64>,
    pub entropy_ratio: Vec<f64>,
    /// Milliseconds since the arm started. Written to JSON lines only, so the
    /// CSV stays reproducible byte for byte.
    #[serde(default)]
    pub wall_ms: u64,
}

/// Fixed leading CSV columns; per-layer columns follow.
pub const CSV_COLUMNS: [&str; 13] = [
    "protocol",
    "arm",
    "seed",
    "step",
    "k",
    "lr",
    "train_loss",
    "gate_grad_norm",
    "val_loss",
    "val_ppl",
    "gate_f1",
    "topk_mass",
    "entropy_ratio",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsRecord {
    pub fn mean_topk_mass(&self) -> Option<f64> {
        mean(&self.topk_mass)
    }

    pub fn mean_entropy_ratio(&self) -> Option<f64> {
        mean(&self.entropy_ratio)
    }

    pub fn csv_header(n_layers: usize) -> String {
        let mut h = CSV_COLUMNS.join(",");
        for l in 0..n_layers {
            let _ = write!(h, ",topk_mass_l{l}");
        }
        for l in 0..n_layers {
            let _ = write!(h, ",entropy_ratio_l{l}");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.protocol,
            self.arm,
            self.seed,
            self.step,
            self.k,
            opt(self.lr),
            opt(self.train_loss),
            opt(self.gate_grad_norm),
            self.val_loss,
            self.val_ppl,
            opt(self.gate_f1),
            opt(self.mean_topk_mass()),
            opt(self.mean_entropy_ratio()),
        );
        for v in self.topk_mass.iter().chain(&self.entropy_ratio) {
            let _ = write!(row, ",{v}");
        }
        row
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }
}
