//! Mask construction and application.
//!
//! Every hard regime (learned gate, oracle, fixed random, stochastic random)
//! goes through the same [`topk_mask`]/[`random_mask`] family and is applied to
//! pre-softmax scores with [`apply_hard`]. Soft gating multiplies post-softmax
//! weights by `sigmoid(G)` without renormalizing ([`apply_soft`]).

mod artifact;

pub use artifact::{decode_mask_file, encode_mask_file, MaskHeader};

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Bilinear gate projections.
///
/// Per layer, the `d_gate`-wide projections of every head are stored side by
/// side as one `d_model × (n_heads·d_gate)` matrix; head `h` owns columns
/// `h·d_gate .. (h+1)·d_gate`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_gate: usize,
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub frozen: bool,
}

impl GateParams {
    /// Random init with `N(0, 1/d_model)` entries, which puts gate scores at
    /// roughly unit scale for layer-normed inputs.
    pub fn init(n_layers: usize, n_heads: usize, d_model: usize, d_gate: usize, seed: u64) -> Result<Self> {
        if d_gate == 0 {
            return Err(Error::Config("gated modes need d_gate > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6a7e);
        let normal = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).expect("finite std");
        let width = n_heads * d_gate;
        let mut draw = || Tensor::from_fn(&[d_model, width], |_| normal.sample(&mut rng));
        let mut query = Vec::with_capacity(n_layers);
        let mut key = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            query.push(draw());
            key.push(draw());
        }
        Ok(GateParams {
            n_layers,
            n_heads,
            d_model,
            d_gate,
            query,
            key,
            frozen: false,
        })
    }

    pub fn count(&self) -> usize {
        self.query.iter().chain(&self.key).map(Tensor::numel).sum()
    }

    /// `W_gq` of one head as a `d_model × d_gate` matrix.
    pub fn head_query(&self, layer: usize, head: usize) -> Tensor {
        self.head_block(&self.query[layer], head)
    }

    /// `W_gk` of one head as a `d_model × d_gate` matrix.
    pub fn head_key(&self, layer: usize, head: usize) -> Tensor {
        self.head_block(&self.key[layer], head)
    }

    fn head_block(&self, m: &Tensor, head: usize) -> Tensor {
        let width = self.n_heads * self.d_gate;
        let d = m.data();
        Tensor::from_fn(&[self.d_model, self.d_gate], |i| {
            let (r, c) = (i / self.d_gate, i % self.d_gate);
            d[r * width + head * self.d_gate + c]
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            out.push((format!("gate.{l}.query"), &self.query[l]));
            out.push((format!("gate.{l}.key"), &self.key[l]));
        }
        out
    }

    pub fn bit_eq(&self, other: &GateParams) -> bool {
        self.query.len() == other.query.len()
            && self.query.iter().zip(&other.query).all(|(a, b)| a.bit_eq(b))
            && self.key.iter().zip(&other.key).all(|(a, b)| a.bit_eq(b))
    }
}

/// Gating regime for one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskMode {
    Dense,
    SoftLearned,
    SoftRandom,
    HardTopK { k: usize },
    Oracle { k: usize },
    FixedRandom { k: usize, seed: u64 },
    StochasticRandom { k: usize },
}

/// Where a hard mask takes its ranking from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankSource {
    /// Learned or random gate scores `G`.
    Gate,
    /// The layer's own attention scores (oracle).
    Teacher,
    /// Uniform draw fixed per run by a seed.
    Random { seed: u64 },
    /// Uniform draw renewed on every forward pass.
    Stochastic,
}

impl MaskMode {
    pub fn needs_gates(&self) -> bool {
        matches!(
            self,
            MaskMode::SoftLearned | MaskMode::SoftRandom | MaskMode::HardTopK { .. }
        )
    }

    pub fn is_soft(&self) -> bool {
        matches!(self, MaskMode::SoftLearned | MaskMode::SoftRandom)
    }

    /// `(k, source)` for the hard regimes, `None` for dense and soft.
    pub fn hard_source(&self) -> Option<(usize, RankSource)> {
        match *self {
            MaskMode::Dense | MaskMode::SoftLearned | MaskMode::SoftRandom => None,
            MaskMode::HardTopK { k } => Some((k, RankSource::Gate)),
            MaskMode::Oracle { k } => Some((k, RankSource::Teacher)),
            MaskMode::FixedRandom { k, seed } => Some((k, RankSource::Random { seed })),
            MaskMode::StochasticRandom { k } => Some((k, RankSource::Stochastic)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskMode::Dense => "dense",
            MaskMode::SoftLearned => "soft_learned",
            MaskMode::SoftRandom => "soft_random",
            MaskMode::HardTopK { .. } => "hard_topk",
            MaskMode::Oracle { .. } => "oracle",
            MaskMode::FixedRandom { .. } => "fixed_random",
            MaskMode::StochasticRandom { .. } => "stochastic_random",
        }
    }

    /// Parses the CLI spelling of a mode.
    pub fn parse(name: &str, k: Option<usize>, seed: u64) -> Result<Self> {
        let need_k = || {
            k.filter(|&k| k >= 1)
                .ok_or_else(|| Error::Config(format!("mode {name} needs --k >= 1")))
        };
        Ok(match name {
            "dense" => MaskMode::Dense,
            "soft_learned" | "soft" => MaskMode::SoftLearned,
            "soft_random" => MaskMode::SoftRandom,
            "hard_topk" => MaskMode::HardTopK { k: need_k()? },
            "oracle" => MaskMode::Oracle { k: need_k()? },
            "fixed_random" => MaskMode::FixedRandom { k: need_k()?, seed },
            "stochastic_random" => MaskMode::StochasticRandom { k: need_k()? },
            other => return Err(Error::Config(format!("unknown mask mode {other:?}"))),
        })
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hard_source() {
            Some((k, _)) => write!(f, "{}(k={k})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Binary keep-mask over the trailing `n × n` (query × key) axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
    k: usize,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>, k: usize) -> Result<Self> {
        if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
            return Err(Error::Shape {
                op: "mask",
                lhs: shape,
                rhs: vec![],
            });
        }
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::Shape {
                op: "mask",
                lhs: shape,
                rhs: vec![keep.len()],
            });
        }
        Ok(Mask { shape, keep, k })
    }

    /// Lower-triangular mask keeping every causally valid position.
    pub fn causal(n: usize) -> Self {
        let keep = (0..n * n).map(|i| i % n <= i / n).collect();
        Mask {
            shape: vec![n, n],
            keep,
            k: n,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seq_len(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Kept positions per query row, in row-major order of all rows.
    pub fn row_counts(&self) -> Vec<usize> {
        let n = self.seq_len();
        self.keep
            .chunks(n)
            .map(|row| row.iter().filter(|&&b| b).count())
            .collect()
    }

    /// Checks causality and that row `q` keeps exactly `min(k, q+1)` entries.
    pub fn validate(&self) -> Result<()> {
        let n = self.seq_len();
        for (r, row) in self.keep.chunks(n).enumerate() {
            let q = r % n;
            if row[q + 1..].iter().any(|&b| b) {
                return Err(Error::Invariant(format!("mask row {r} keeps a future key")));
            }
            let count = row.iter().filter(|&&b| b).count();
            if count != self.k.min(q + 1) {
                return Err(Error::Invariant(format!(
                    "mask row {r} keeps {count} entries, expected {}",
                    self.k.min(q + 1)
                )));
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.keep.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    Ok(())
}

/// Causal top-k selection over `scores[..., n, n]`.
///
/// Row `q` keeps the `min(k, q+1)` highest-scoring keys among `0..=q`; ties go
/// to the lower key index. The result carries no gradient.
pub fn topk_mask(scores: &Tensor, k: usize) -> Result<Mask> {
    check_k(k)?;
    let shape = scores.shape().to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::Shape {
            op: "topk_mask",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[shape.len() - 1];
    let data = scores.data();
    let mut keep = vec![false; data.len()];
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for (r, row) in data.chunks(n).enumerate() {
        let q = r % n;
        let take = k.min(q + 1);
        let out = &mut keep[r * n..(r + 1) * n];
        if take == q + 1 {
            out[..=q].iter_mut().for_each(|b| *b = true);
            continue;
        }
        idx.clear();
        idx.extend(0..=q);
        let order = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        idx.select_nth_unstable_by(take - 1, order);
        for &j in &idx[..take] {
            out[j] = true;
        }
    }
    Mask::new(shape, keep, k)
}

/// Oracle mask: top-k of a dense model's own attention weights (equivalently
/// of its pre-softmax scores).
pub fn oracle_mask(teacher: &Tensor, k: usize) -> Result<Mask> {
    topk_mask(teacher, k)
}

/// Uniform causal random mask of shape `lead ++ [n, n]`: each row `q` keeps
/// `min(k, q+1)` of its valid keys, drawn without replacement.
pub fn random_mask(lead: &[usize], n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Mask> {
    check_k(k)?;
    let rows = lead.iter().product::<usize>() * n;
    let mut keep = vec![false; rows * n];
    for r in 0..rows {
        let q = r % n;
        let take = k.min(q + 1);
        let out = &mut keep[r * n..(r + 1) * n];
        if take == q + 1 {
            out[..=q].iter_mut().for_each(|b| *b = true);
        } else {
            for j in sample(rng, q + 1, take) {
                out[j] = true;
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.extend([n, n]);
    Mask::new(shape, keep, k)
}

/// The per-run random mask of one layer, shape `[n_heads, n, n]`, fully
/// determined by `(seed, layer, n, k)`.
pub fn fixed_random_mask(seed: u64, layer: usize, n_heads: usize, n: usize, k: usize) -> Result<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    random_mask(&[n_heads], n, k, &mut rng)
}

/// A fresh random mask for one layer of one forward pass, shape
/// `[batch, n_heads, n, n]`.
pub fn stochastic_mask(batch: usize, n_heads: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Mask> {
    random_mask(&[batch, n_heads], n, k, rng)
}

/// Gate scores `G = (x W_gq)(x W_gk)^T / sqrt(d_gate)` for every head of one
/// layer. `x` is `[B, n, d]`; the result is `[B, h, n, n]`.
pub fn gate_scores(tape: &mut Tape, x: Var, query: Var, key: Var, n_heads: usize, d_gate: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "gate_scores",
            lhs: s,
            rhs: vec![3],
        });
    }
    let (b, n) = (s[0], s[1]);
    let split = |tape: &mut Tape, w: Var| -> Result<Var> {
        let p = tape.matmul(x, w, false)?;
        let p = tape.reshape(p, &[b, n, n_heads, d_gate])?;
        tape.swap_axes12(p)
    };
    let gq = split(tape, query)?;
    let gk = split(tape, key)?;
    let g = tape.matmul(gq, gk, true)?;
    tape.scale(g, 1.0 / (d_gate as f64).sqrt())
}

/// Sets masked-out pre-softmax scores to `-inf`. Kept entries pass through
/// with their gradient.
pub fn apply_hard(tape: &mut Tape, scores: Var, mask: &Mask) -> Result<Var> {
    let n = mask.seq_len();
    if let Some(r) = mask.keep.chunks(n).position(|row| !row.iter().any(|&b| b)) {
        return Err(Error::InvalidRow { row: r });
    }
    let s = tape.value(scores).shape();
    if s.len() < 2 || s[s.len() - 1] != n || s[s.len() - 2] != n {
        return Err(Error::Shape {
            op: "apply_hard",
            lhs: s.to_vec(),
            rhs: mask.shape.clone(),
        });
    }
    tape.mask_fill(scores, &mask.keep)
}

/// `P ⊙ sigmoid(G)` on post-softmax weights, without renormalization.
pub fn apply_soft(tape: &mut Tape, probs: Var, gate: Var) -> Result<Var> {
    let s = tape.sigmoid(gate)?;
    tape.mul(probs, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_reference(row: &[f64], q: usize, k: usize) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..=q).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut keep = vec![false; row.len()];
        for &j in idx.iter().take(k.min(q + 1)) {
            keep[j] = true;
        }
        keep
    }

    #[test]
    fn topk_full_k_keeps_every_valid_position() {
        let s = Tensor::from_fn(&[2, 5, 5], |i| (i as f64).sin());
        let m = topk_mask(&s, 5).unwrap();
        let causal = Mask::causal(5);
        for (r, row) in m.keep().chunks(5).enumerate() {
            assert_eq!(row, &causal.keep()[(r % 5) * 5..(r % 5 + 1) * 5]);
        }
        assert_eq!(topk_mask(&s, 50).unwrap().keep(), m.keep());
    }

    #[test]
    fn topk_argmax_row() {
        let mut d = vec![0.0; 9];
        d[6..9].copy_from_slice(&[3.0, 1.0, 2.0]);
        let m = topk_mask(&Tensor::new(vec![3, 3], d).unwrap(), 1).unwrap();
        assert_eq!(&m.keep()[6..9], &[true, false, false]);
    }

    #[test]
    fn topk_ties_go_to_lower_index() {
        let m = topk_mask(&Tensor::zeros(&[4, 4]), 2).unwrap();
        assert_eq!(&m.keep()[12..16], &[true, true, false, false]);
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for k in 1..=6 {
            let s = Tensor::from_fn(&[3, 6, 6], |_| normal.sample(&mut rng));
            let m = topk_mask(&s, k).unwrap();
            m.validate().unwrap();
            for (r, row) in s.data().chunks(6).enumerate() {
                assert_eq!(
                    &m.keep()[r * 6..(r + 1) * 6],
                    sorted_reference(row, r % 6, k).as_slice()
                );
            }
        }
    }

    #[test]
    fn zero_k_is_rejected() {
        assert!(matches!(topk_mask(&Tensor::zeros(&[2, 2]), 0), Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_mask(&[], 3, 0, &mut rng).is_err());
    }

    #[test]
    fn oracle_of_one_hot_teacher() {
        let n = 4;
        let mut p = vec![0.0; n * n];
        for q in 0..n {
            p[q * n + q / 2] = 1.0;
        }
        let m = oracle_mask(&Tensor::new(vec![n, n], p.clone()).unwrap(), 1).unwrap();
        let want: Vec<bool> = p.iter().map(|&v| v == 1.0).collect();
        assert_eq!(m.keep(), want.as_slice());
    }

    #[test]
    fn random_masks_have_exact_row_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in [1, 3, 8, 20] {
            let m = random_mask(&[2, 3], 8, k, &mut rng).unwrap();
            m.validate().unwrap();
        }
        let full = random_mask(&[1], 6, 6, &mut rng).unwrap();
        assert_eq!(full.keep(), Mask::causal(6).keep());
    }

    #[test]
    fn fixed_random_mask_is_reproducible() {
        let a = fixed_random_mask(5, 1, 2, 16, 4).unwrap();
        let b = fixed_random_mask(5, 1, 2, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, fixed_random_mask(5, 0, 2, 16, 4).unwrap());
    }

    #[test]
    fn apply_hard_rejects_empty_row() {
        let mut keep = Mask::causal(3).keep().to_vec();
        keep[0] = false;
        let mask = Mask::new(vec![3, 3], keep, 1).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            apply_hard(&mut tape, s, &mask),
            Err(Error::InvalidRow { row: 0 })
        ));
    }

    #[test]
    fn masked_position_has_exactly_zero_probability() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_fn(&[3, 3], |i| i as f64 * 0.3));
        let keep = vec![true, false, false, true, true, false, true, false, true];
        let mask = Mask::new(vec![3, 3], keep, 2).unwrap();
        let a = apply_hard(&mut tape, s, &mask).unwrap();
        let p = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(p).data()[7], 0.0);
    }

    #[test]
    fn soft_gate_limits() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_fn(&[2, 2], |i| [1.0, 0.0, 0.25, 0.75][i]));
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let big = tape.constant(Tensor::full(&[2, 2], 1e3));
        let half = apply_soft(&mut tape, p, zero).unwrap();
        let same = apply_soft(&mut tape, p, big).unwrap();
        assert_eq!(tape.value(half).data(), &[0.5, 0.0, 0.125, 0.375]);
        assert!(tape.value(same).bit_eq(tape.value(p)));
    }

    #[test]
    fn gate_scores_zero_query_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 4], |i| i as f64));
        let q = tape.constant(Tensor::zeros(&[4, 2]));
        let k = tape.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let g = gate_scores(&mut tape, x, q, k, 1, 2).unwrap();
        assert_eq!(tape.value(g).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_scores_hand_case() {
        // d=2, d_gate=1, x = ones: G = (x·wq)(x·wk) = (wq0+wq1)(wk0+wk1).
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let q = tape.constant(Tensor::new(vec![2, 1], vec![0.5, 1.5]).unwrap());
        let k = tape.constant(Tensor::new(vec![2, 1], vec![-1.0, 3.0]).unwrap());
        let g = gate_scores(&mut tape, x, q, k, 1, 1).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn head_blocks_partition_columns() {
        let g = GateParams::init(2, 3, 4, 2, 9).unwrap();
        assert_eq!(g.count(), 2 * 2 * 3 * 4 * 2);
        let h1 = g.head_query(1, 2);
        assert_eq!(h1.shape(), &[4, 2]);
        assert_eq!(h1.data()[3], g.query[1].data()[6 + 4 + 1]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            MaskMode::parse("hard_topk", Some(4), 0).unwrap(),
            MaskMode::HardTopK { k: 4 }
        );
        assert!(MaskMode::parse("oracle", None, 0).is_err());
        assert!(MaskMode::parse("bogus", Some(1), 0).is_err());
        assert!(MaskMode::HardTopK { k: 1 }.needs_gates());
        assert!(!MaskMode::Oracle { k: 1 }.needs_gates());
    }
}
