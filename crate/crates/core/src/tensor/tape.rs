use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gelu, gelu_grad, gelu_tanh, gemm, sigmoid, softplus};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBcast {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Sigmoid {
        a: usize,
    },
    Gelu {
        a: usize,
        tanh: Vec<f64>,
    },
    Softmax {
        a: usize,
        width: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        width: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
        width: usize,
    },
    MaskFill {
        a: usize,
        keep: Vec<bool>,
    },
    Reshape {
        a: usize,
    },
    SwapAxes12 {
        a: usize,
        dims: [usize; 4],
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        width: usize,
    },
    KlRows {
        logits: usize,
        teacher: Vec<f64>,
        probs: Vec<f64>,
        valid: Vec<bool>,
        width: usize,
        rows: usize,
    },
    Bce {
        logits: usize,
        target: Vec<f64>,
        valid: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of the ops executed in one forward pass.
///
/// Nodes are appended after their inputs, so index order is a topological
/// order and `backward` visits each node exactly once in reverse.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: fresh_id(),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every node. Handles issued before the call become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("stale Var passed to Tape::value");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    ///
    /// `None` for nodes that do not require a gradient, for non-leaf nodes
    /// and before `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.nodes.get(v.index)?.grad.as_deref()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Lifecycle(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { tape: self.id, index }
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a single matrix shared by every leading index of `a`, or
    /// carries the same leading axes as `a`. With `trans_b` the last two axes
    /// of `b` are read as `n×k` instead of `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let sa = self.shape(ai).to_vec();
        let sb = self.shape(bi).to_vec();
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let b_batched = sb.len() > 2;
        if b_batched && &sb[..sb.len() - 2] != lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(ai), self.data(bi));
            if b_batched {
                for t in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[t * m * k..],
                        false,
                        &bd[t * k * n..],
                        trans_b,
                        &mut out[t * m * n..],
                        false,
                    );
                }
            } else {
                gemm(batch * m, k, n, ad, false, bd, trans_b, &mut out, false);
            }
        }
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a: ai,
                b: bi,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ai, bi)?;
        let data: Vec<f64> = self.data(ai).iter().zip(self.data(bi)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Add { a: ai, b: bi }, rg))
    }

    /// `a + b` where the shape of `b` equals the trailing axes of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.shape(ai), self.shape(bi));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op: "add_bcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let period = self.nodes[bi].value.numel();
        let bd = self.data(bi);
        let mut data = Vec::with_capacity(self.nodes[ai].value.numel());
        for chunk in self.data(ai).chunks(period) {
            data.extend(chunk.iter().zip(bd).map(|(x, y)| x + y));
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::AddBcast { a: ai, b: bi }, rg))
    }

    /// Element-wise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ai, bi)?;
        let data: Vec<f64> = self.data(ai).iter().zip(self.data(bi)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let data: Vec<f64> = self.data(ai).iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Scale { a: ai, factor }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let data: Vec<f64> = self.data(ai).iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Sigmoid { a: ai }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let tanh: Vec<f64> = self.data(ai).iter().map(|&x| gelu_tanh(x)).collect();
        let data: Vec<f64> = self.data(ai).iter().zip(&tanh).map(|(&x, &t)| gelu(x, t)).collect();
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.rg(&[ai]);
        let tanh = if rg { tanh } else { Vec::new() };
        Ok(self.push(value, Op::Gelu { a: ai, tanh }, rg))
    }

    /// Softmax over the last axis. `-inf` entries map to exactly zero; a row
    /// with no finite entry is rejected.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let width = self.nodes[ai].value.last_dim();
        let mut data = self.data(ai).to_vec();
        softmax_in_place(&mut data, width)?;
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Softmax { a: ai, width }, rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let width = self.nodes[xi].value.last_dim();
        for p in [gi, bi] {
            if self.shape(p) != [width] {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: self.shape(xi).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(xi);
        let (gd, bd) = (self.data(gi), self.data(bi));
        let rows = xd.len() / width;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..width {
                let h = (row[c] - mean) * rs;
                xhat[r * width + c] = h;
                out[r * width + c] = h * gd[c] + bd[c];
            }
        }
        let value = Tensor::new(self.shape(xi).to_vec(), out)?;
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                width,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` (`V×d`) into a tensor of shape `prefix ++ [d]`.
    pub fn embed(&mut self, ids: &[usize], prefix: &[usize], table: Var) -> Result<Var> {
        let ti = self.check(table)?;
        let st = self.shape(ti).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embed",
                lhs: prefix.to_vec(),
                rhs: st,
            });
        }
        let (vocab, width) = (st[0], st[1]);
        let td = self.data(ti);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&td[id * width..(id + 1) * width]);
        }
        let mut shape = prefix.to_vec();
        shape.push(width);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[ti]);
        Ok(self.push(
            value,
            Op::Embed {
                table: ti,
                ids: ids.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Replaces entries whose `keep` flag is false with `-inf`.
    ///
    /// `keep` is indexed modulo its length, so a mask covering the trailing
    /// axes broadcasts over the leading ones.
    pub fn mask_fill(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ai = self.check(a)?;
        let numel = self.nodes[ai].value.numel();
        if keep.is_empty() || !numel.is_multiple_of(keep.len()) {
            return Err(Error::Shape {
                op: "mask_fill",
                lhs: self.shape(ai).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in self.data(ai).chunks(keep.len()) {
            data.extend(
                chunk
                    .iter()
                    .zip(keep)
                    .map(|(&x, &k)| if k { x } else { f64::NEG_INFINITY }),
            );
        }
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(
            value,
            Op::MaskFill {
                a: ai,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Reshape { a: ai }, rg))
    }

    /// `[d0, d1, d2, d3] -> [d0, d2, d1, d3]`; used to split and merge heads.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.shape(ai);
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "swap_axes12",
                lhs: s.to_vec(),
                rhs: vec![4],
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.data(ai), dims);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::SwapAxes12 { a: ai, dims }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s: f64 = self.data(ai).iter().sum();
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ai }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean next-token negative log-likelihood (nats) over all rows of
    /// `logits[..., V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let width = self.nodes[li].value.last_dim();
        let rows = self.nodes[li].value.numel() / width;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(li).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
            return Err(Error::Index {
                index: bad,
                extent: width,
            });
        }
        let mut probs = self.data(li).to_vec();
        let mut total = 0.0;
        for (r, (row, &t)) in probs.chunks_mut(width).zip(targets).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::InvalidRow { row: r });
            }
            let logit = row[t];
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            total += max + z.ln() - logit;
        }
        let rg = self.rg(&[li]);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
                width,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(teacher_row || softmax(logits_row))`, restricted
    /// to positions flagged in `valid` (indexed modulo its length).
    ///
    /// The teacher is a detached value; gradient reaches only `logits`.
    pub fn kl_rows(&mut self, teacher: &[f64], logits: Var, valid: &[bool]) -> Result<Var> {
        let li = self.check(logits)?;
        let width = self.nodes[li].value.last_dim();
        let numel = self.nodes[li].value.numel();
        if teacher.len() != numel || valid.is_empty() || !numel.is_multiple_of(valid.len()) {
            return Err(Error::Shape {
                op: "kl_rows",
                lhs: self.shape(li).to_vec(),
                rhs: vec![teacher.len(), valid.len()],
            });
        }
        let period = valid.len();
        let ld = self.data(li);
        let rows = numel / width;
        let mut probs = vec![0.0; numel];
        let valid_full: Vec<bool> = (0..numel).map(|i| valid[i % period]).collect();
        let mut total = 0.0;
        for r in 0..rows {
            let base = r * width;
            let mut max = f64::NEG_INFINITY;
            for c in 0..width {
                if valid_full[base + c] {
                    max = max.max(ld[base + c]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidRow { row: r });
            }
            let mut z = 0.0;
            for c in 0..width {
                if valid_full[base + c] {
                    z += (ld[base + c] - max).exp();
                }
            }
            let lse = max + z.ln();
            for c in 0..width {
                let i = base + c;
                if !valid_full[i] {
                    continue;
                }
                let logq = ld[i] - lse;
                probs[i] = logq.exp();
                let p = teacher[i];
                if p > 0.0 {
                    total += p * (p.ln() - logq);
                }
            }
        }
        let rg = self.rg(&[li]);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::KlRows {
                logits: li,
                teacher: teacher.to_vec(),
                probs,
                valid: valid_full,
                width,
                rows,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 `target`
    /// over the positions flagged in `valid` (indexed modulo its length).
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64], valid: &[bool]) -> Result<Var> {
        let li = self.check(logits)?;
        let numel = self.nodes[li].value.numel();
        if target.len() != numel || valid.is_empty() || !numel.is_multiple_of(valid.len()) {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.shape(li).to_vec(),
                rhs: vec![target.len(), valid.len()],
            });
        }
        let period = valid.len();
        let valid_full: Vec<bool> = (0..numel).map(|i| valid[i % period]).collect();
        let ld = self.data(li);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..numel {
            if valid_full[i] {
                let x = ld[i];
                total += softplus(x) - target[i] * x;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidRow { row: 0 });
        }
        let rg = self.rg(&[li]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::Bce {
                logits: li,
                target: target.to_vec(),
                valid: valid_full,
                count,
            },
            rg,
        ))
    }

    /// Populates the gradient of `loss` with respect to every leaf that
    /// requires one. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(Error::Lifecycle(
                "backward already ran on this tape; clear it first".into(),
            ));
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(li).to_vec(),
                rhs: vec![],
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].requires_grad;
        let out = nodes[idx].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            } => {
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                if needs(a) {
                    let ga = slot(grads, a, ad.len());
                    if b_batched {
                        for t in 0..batch {
                            // dA = g · op(B)^T
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..],
                                false,
                                &bd[t * k * n..],
                                !trans_b,
                                &mut ga[t * m * k..],
                                true,
                            );
                        }
                    } else {
                        gemm(batch * m, n, k, g, false, bd, !trans_b, ga, true);
                    }
                }
                if needs(b) {
                    let gb = slot(grads, b, bd.len());
                    let rows = if b_batched { m } else { batch * m };
                    let reps = if b_batched { batch } else { 1 };
                    for t in 0..reps {
                        let (aoff, goff, boff) = (t * rows * k, t * rows * n, t * k * n);
                        if trans_b {
                            // dB[n×k] = g^T · A
                            gemm(n, rows, k, &g[goff..], true, &ad[aoff..], false, &mut gb[boff..], true);
                        } else {
                            // dB[k×n] = A^T · g
                            gemm(k, rows, n, &ad[aoff..], true, &g[goff..], false, &mut gb[boff..], true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for i in [a, b] {
                    if needs(i) {
                        axpy(slot(grads, i, g.len()), g, 1.0);
                    }
                }
            }
            &Op::AddBcast { a, b } => {
                if needs(a) {
                    axpy(slot(grads, a, g.len()), g, 1.0);
                }
                if needs(b) {
                    let period = nodes[b].value.numel();
                    let gb = slot(grads, b, period);
                    for chunk in g.chunks(period) {
                        axpy(gb, chunk, 1.0);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                if needs(a) {
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if needs(b) {
                    let gb = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if needs(a) {
                    axpy(slot(grads, a, g.len()), g, factor);
                }
            }
            &Op::Sigmoid { a } => {
                if needs(a) {
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                if needs(*a) {
                    let ad = nodes[*a].value.data();
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(ad[i], tanh[i]);
                    }
                }
            }
            &Op::Softmax { a, width } => {
                if needs(a) {
                    let ga = slot(grads, a, g.len());
                    for r in 0..g.len() / width {
                        let span = r * width..(r + 1) * width;
                        let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, gi) in ga[span].iter_mut().enumerate() {
                            *gi += y[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                rstd,
            } => {
                let (x, gain, bias, width) = (*x, *gain, *bias, *width);
                let rows = g.len() / width;
                if needs(gain) {
                    let gg = slot(grads, gain, width);
                    for r in 0..rows {
                        for c in 0..width {
                            gg[c] += g[r * width + c] * xhat[r * width + c];
                        }
                    }
                }
                if needs(bias) {
                    let gb = slot(grads, bias, width);
                    for r in 0..rows {
                        for c in 0..width {
                            gb[c] += g[r * width + c];
                        }
                    }
                }
                if needs(x) {
                    let gd = nodes[gain].value.data();
                    let gx = slot(grads, x, g.len());
                    let mut dxhat = vec![0.0; width];
                    for r in 0..rows {
                        let base = r * width;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..width {
                            dxhat[c] = g[base + c] * gd[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[base + c];
                        }
                        mean_d /= width as f64;
                        mean_dx /= width as f64;
                        for c in 0..width {
                            gx[base + c] += rstd[r] * (dxhat[c] - mean_d - xhat[base + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Embed { table, ids, width } => {
                let (table, width) = (*table, *width);
                if needs(table) {
                    let numel = nodes[table].value.numel();
                    let gt = slot(grads, table, numel);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id * width..(id + 1) * width],
                            &g[r * width..(r + 1) * width],
                            1.0,
                        );
                    }
                }
            }
            Op::MaskFill { a, keep } => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (dst, src) in ga.chunks_mut(keep.len()).zip(g.chunks(keep.len())) {
                        for ((d, s), &k) in dst.iter_mut().zip(src).zip(keep.iter()) {
                            if k {
                                *d += s;
                            }
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if needs(a) {
                    axpy(slot(grads, a, g.len()), g, 1.0);
                }
            }
            &Op::SwapAxes12 { a, dims } => {
                if needs(a) {
                    let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    axpy(slot(grads, a, g.len()), &back, 1.0);
                }
            }
            &Op::Sum { a } => {
                if needs(a) {
                    let n = nodes[a].value.numel();
                    slot(grads, a, n).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                width,
            } => {
                if needs(*logits) {
                    let rows = targets.len();
                    let scale = g[0] / rows as f64;
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..*width {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * width + c] += scale * (probs[r * width + c] - onehot);
                        }
                    }
                }
            }
            Op::KlRows {
                logits,
                teacher,
                probs,
                valid,
                width,
                rows,
            } => {
                if needs(*logits) {
                    let scale = g[0] / *rows as f64;
                    let gl = slot(grads, *logits, probs.len());
                    for r in 0..*rows {
                        let span = r * width..(r + 1) * width;
                        let mass: f64 = teacher[span.clone()]
                            .iter()
                            .zip(&valid[span.clone()])
                            .filter(|(_, &v)| v)
                            .map(|(p, _)| p)
                            .sum();
                        for i in span {
                            if valid[i] {
                                gl[i] += scale * (probs[i] * mass - teacher[i]);
                            }
                        }
                    }
                }
            }
            Op::Bce {
                logits,
                target,
                valid,
                count,
            } => {
                if needs(*logits) {
                    let xd = nodes[*logits].value.data();
                    let scale = g[0] / *count as f64;
                    let gl = slot(grads, *logits, xd.len());
                    for i in 0..xd.len() {
                        if valid[i] {
                            gl[i] += scale * (sigmoid(xd[i]) - target[i]);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn swap12(src: &[f64], [d0, d1, d2, d3]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let from = ((a * d1 + b) * d2 + c) * d3;
                let to = ((a * d2 + c) * d1 + b) * d3;
                out[to..to + d3].copy_from_slice(&src[from..from + d3]);
            }
        }
    }
    out
}

/// Row-wise softmax on a flat buffer, stabilized by the row max.
pub(crate) fn softmax_in_place(data: &mut [f64], width: usize) -> Result<()> {
    for (r, row) in data.chunks_mut(width).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(Error::InvalidRow { row: r });
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            z += *v;
        }
        let inv = 1.0 / z;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}
