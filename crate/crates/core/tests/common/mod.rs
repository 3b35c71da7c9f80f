//! Shared helpers: central-difference gradient checks for every tape op.
#![allow(dead_code, clippy::needless_range_loop)]

use absorbkit::gating::{apply_hard, apply_soft, gate_scores, topk_mask, Mask};
use absorbkit::metrics::{bce_distill_loss, causal_flags, kl_distill_loss};
use absorbkit::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor: gradients below this size are compared absolutely.
pub const FLOOR: f64 = 1e-3;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Builds the op on fresh leaves and reduces it to a scalar with fixed
/// random weights, so every output entry contributes to the check.
fn project(
    f: &dyn Fn(&mut Tape, &[Var]) -> absorbkit::Result<Var>,
    inputs: &[Tensor],
    weights: &mut Option<Tensor>,
    seed: u64,
) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).expect("op builds");
    let shape = tape.value(out).shape().to_vec();
    let w = weights
        .get_or_insert_with(|| {
            let mut r = rng(seed ^ 0x77);
            Tensor::from_fn(&shape, |_| r.random_range(0.5..1.5))
        })
        .clone();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).expect("same shape");
    let loss = tape.sum(prod).expect("sum");
    (tape, vars, loss)
}

/// Largest relative error between analytic and central-difference
/// gradients over every element of every input.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> absorbkit::Result<Var>, seed: u64) -> f64 {
    let mut weights = None;
    let (mut tape, vars, loss) = project(f, inputs, &mut weights, seed);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf grad").to_vec())
        .collect();
    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut w = weights.clone();
        let (tape, _, loss) = project(f, perturbed, &mut w, seed);
        tape.value(loss).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// One differentiable op under test: draws a random instance and returns
/// its worst relative gradient error.
pub struct OpCase {
    pub name: &'static str,
    pub check: fn(u64) -> f64,
}

fn causal_keep_mask(rng: &mut ChaCha8Rng, lead: &[usize], n: usize) -> Mask {
    let mut shape = lead.to_vec();
    shape.extend([n, n]);
    let k = dim(rng, 1, n);
    topk_mask(&rand_tensor(&shape, rng, 1.0), k).expect("valid k")
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            check: |s| {
                let mut r = rng(s);
                let (m, p, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
                let b = dim(&mut r, 1, 2);
                let x = rand_tensor(&[b, m, p], &mut r, 1.0);
                let w = rand_tensor(&[p, n], &mut r, 1.0);
                gradcheck(&[x, w], &|t, v| t.matmul(v[0], v[1], false), s)
            },
        },
        OpCase {
            name: "matmul_batched_trans_b",
            check: |s| {
                let mut r = rng(s);
                let (b, m, p, n) = (
                    dim(&mut r, 1, 3),
                    dim(&mut r, 1, 4),
                    dim(&mut r, 1, 4),
                    dim(&mut r, 1, 4),
                );
                let x = rand_tensor(&[b, m, p], &mut r, 1.0);
                let y = rand_tensor(&[b, n, p], &mut r, 1.0);
                gradcheck(&[x, y], &|t, v| t.matmul(v[0], v[1], true), s)
            },
        },
        OpCase {
            name: "add",
            check: |s| {
                let mut r = rng(s);
                let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 4)];
                let a = rand_tensor(&shape, &mut r, 1.0);
                let b = rand_tensor(&shape, &mut r, 1.0);
                gradcheck(&[a, b], &|t, v| t.add(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "add_bcast",
            check: |s| {
                let mut r = rng(s);
                let (b, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5));
                let a = rand_tensor(&[b, n], &mut r, 1.0);
                let bias = rand_tensor(&[n], &mut r, 1.0);
                gradcheck(&[a, bias], &|t, v| t.add_bcast(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "elementwise_mul",
            check: |s| {
                let mut r = rng(s);
                let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 4)];
                let a = rand_tensor(&shape, &mut r, 2.0);
                let b = rand_tensor(&shape, &mut r, 2.0);
                gradcheck(&[a, b], &|t, v| t.mul(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "scale",
            check: |s| {
                let mut r = rng(s);
                let a = rand_tensor(&[dim(&mut r, 1, 6)], &mut r, 1.0);
                let c: f64 = r.random_range(-3.0..3.0);
                gradcheck(&[a], &move |t, v| t.scale(v[0], c), s)
            },
        },
        OpCase {
            name: "sigmoid",
            check: |s| {
                let mut r = rng(s);
                let a = rand_tensor(&[dim(&mut r, 1, 3), dim(&mut r, 1, 4)], &mut r, 4.0);
                gradcheck(&[a], &|t, v| t.sigmoid(v[0]), s)
            },
        },
        OpCase {
            name: "gelu",
            check: |s| {
                let mut r = rng(s);
                let a = rand_tensor(&[dim(&mut r, 1, 3), dim(&mut r, 1, 4)], &mut r, 4.0);
                gradcheck(&[a], &|t, v| t.gelu(v[0]), s)
            },
        },
        OpCase {
            name: "softmax_rows",
            check: |s| {
                let mut r = rng(s);
                let a = rand_tensor(&[dim(&mut r, 1, 3), dim(&mut r, 1, 5)], &mut r, 3.0);
                gradcheck(&[a], &|t, v| t.softmax_rows(v[0]), s)
            },
        },
        OpCase {
            name: "layernorm",
            check: |s| {
                let mut r = rng(s);
                let (rows, d) = (dim(&mut r, 1, 3), dim(&mut r, 2, 6));
                let x = rand_tensor(&[rows, d], &mut r, 2.0);
                let g = rand_tensor(&[d], &mut r, 1.5);
                let b = rand_tensor(&[d], &mut r, 1.0);
                gradcheck(&[x, g, b], &|t, v| t.layernorm(v[0], v[1], v[2], 1e-5), s)
            },
        },
        OpCase {
            name: "embed",
            check: |s| {
                let mut r = rng(s);
                let (vocab, d, n) = (dim(&mut r, 2, 6), dim(&mut r, 1, 4), dim(&mut r, 1, 6));
                let table = rand_tensor(&[vocab, d], &mut r, 1.0);
                let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..vocab)).collect();
                gradcheck(&[table], &move |t, v| t.embed(&ids, &[ids.len()], v[0]), s)
            },
        },
        OpCase {
            name: "mask_fill_softmax",
            check: |s| {
                let mut r = rng(s);
                let (b, n) = (dim(&mut r, 1, 2), dim(&mut r, 1, 5));
                let keep = causal_flags(n);
                let a = rand_tensor(&[b, n, n], &mut r, 2.0);
                gradcheck(
                    &[a],
                    &move |t, v| {
                        let m = t.mask_fill(v[0], &keep)?;
                        t.softmax_rows(m)
                    },
                    s,
                )
            },
        },
        OpCase {
            name: "reshape",
            check: |s| {
                let mut r = rng(s);
                let (a, b) = (dim(&mut r, 1, 3), dim(&mut r, 1, 4));
                let x = rand_tensor(&[a, b], &mut r, 1.0);
                gradcheck(&[x], &move |t, v| t.reshape(v[0], &[b, a]), s)
            },
        },
        OpCase {
            name: "swap_axes12",
            check: |s| {
                let mut r = rng(s);
                let shape = [
                    dim(&mut r, 1, 2),
                    dim(&mut r, 1, 3),
                    dim(&mut r, 1, 3),
                    dim(&mut r, 1, 3),
                ];
                let x = rand_tensor(&shape, &mut r, 1.0);
                gradcheck(&[x], &|t, v| t.swap_axes12(v[0]), s)
            },
        },
        OpCase {
            name: "sum",
            check: |s| {
                let mut r = rng(s);
                let x = rand_tensor(&[dim(&mut r, 1, 3), dim(&mut r, 1, 4)], &mut r, 1.0);
                gradcheck(&[x], &|t, v| t.sum(v[0]), s)
            },
        },
        OpCase {
            name: "mean",
            check: |s| {
                let mut r = rng(s);
                let x = rand_tensor(&[dim(&mut r, 1, 3), dim(&mut r, 1, 4)], &mut r, 1.0);
                gradcheck(&[x], &|t, v| t.mean(v[0]), s)
            },
        },
        OpCase {
            name: "cross_entropy",
            check: |s| {
                let mut r = rng(s);
                let (rows, vocab) = (dim(&mut r, 1, 5), dim(&mut r, 2, 7));
                let logits = rand_tensor(&[rows, vocab], &mut r, 3.0);
                let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..vocab)).collect();
                gradcheck(&[logits], &move |t, v| t.cross_entropy(v[0], &targets), s)
            },
        },
        OpCase {
            name: "kl_rows",
            check: |s| {
                let mut r = rng(s);
                let n = dim(&mut r, 1, 5);
                let teacher = random_causal_distribution(&mut r, &[1], n);
                let g = rand_tensor(&[1, n, n], &mut r, 2.0);
                let valid = causal_flags(n);
                gradcheck(&[g], &move |t, v| t.kl_rows(teacher.data(), v[0], &valid), s)
            },
        },
        OpCase {
            name: "bce_with_logits",
            check: |s| {
                let mut r = rng(s);
                let n = dim(&mut r, 1, 5);
                let target: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
                let g = rand_tensor(&[n, n], &mut r, 3.0);
                let valid = causal_flags(n);
                gradcheck(&[g], &move |t, v| t.bce_with_logits(v[0], &target, &valid), s)
            },
        },
        OpCase {
            name: "gate_scores",
            check: |s| {
                let mut r = rng(s);
                let (b, n, d, h, dg) = (
                    dim(&mut r, 1, 2),
                    dim(&mut r, 1, 4),
                    dim(&mut r, 1, 4),
                    dim(&mut r, 1, 2),
                    dim(&mut r, 1, 3),
                );
                let x = rand_tensor(&[b, n, d], &mut r, 1.0);
                let q = rand_tensor(&[d, h * dg], &mut r, 1.0);
                let k = rand_tensor(&[d, h * dg], &mut r, 1.0);
                gradcheck(&[x, q, k], &move |t, v| gate_scores(t, v[0], v[1], v[2], h, dg), s)
            },
        },
        OpCase {
            name: "apply_hard_softmax",
            check: |s| {
                let mut r = rng(s);
                let (h, n) = (dim(&mut r, 1, 2), dim(&mut r, 1, 5));
                let mask = causal_keep_mask(&mut r, &[h], n);
                let a = rand_tensor(&[h, n, n], &mut r, 2.0);
                gradcheck(
                    &[a],
                    &move |t, v| {
                        let m = apply_hard(t, v[0], &mask)?;
                        t.softmax_rows(m)
                    },
                    s,
                )
            },
        },
        OpCase {
            name: "apply_soft",
            check: |s| {
                let mut r = rng(s);
                let n = dim(&mut r, 1, 5);
                let p = random_causal_distribution(&mut r, &[1], n);
                let g = rand_tensor(&[1, n, n], &mut r, 3.0);
                gradcheck(&[p, g], &|t, v| apply_soft(t, v[0], v[1]), s)
            },
        },
        OpCase {
            name: "kl_distill_loss",
            check: |s| {
                let mut r = rng(s);
                let (h, n) = (dim(&mut r, 1, 2), dim(&mut r, 1, 5));
                let teacher = random_causal_distribution(&mut r, &[h], n);
                let g = rand_tensor(&[h, n, n], &mut r, 2.0);
                gradcheck(&[g], &move |t, v| kl_distill_loss(t, &teacher, v[0]), s)
            },
        },
        OpCase {
            name: "bce_distill_loss",
            check: |s| {
                let mut r = rng(s);
                let (h, n) = (dim(&mut r, 1, 2), dim(&mut r, 1, 5));
                let oracle = causal_keep_mask(&mut r, &[h], n);
                let g = rand_tensor(&[h, n, n], &mut r, 2.0);
                gradcheck(&[g], &move |t, v| bce_distill_loss(t, v[0], &oracle), s)
            },
        },
    ]
}

/// Row-stochastic causal attention `lead ++ [n, n]` with zeros above the
/// diagonal.
pub fn random_causal_distribution(rng: &mut ChaCha8Rng, lead: &[usize], n: usize) -> Tensor {
    let mut shape = lead.to_vec();
    shape.extend([n, n]);
    let mut t = Tensor::zeros(&shape);
    for (r, row) in t.data_mut().chunks_mut(n).enumerate() {
        let q = r % n;
        let raw: Vec<f64> = (0..=q).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (j, v) in raw.iter().enumerate() {
            row[j] = v / total;
        }
    }
    t
}

/// Runs every op over [`INSTANCES`] seeds. Returns `(name, worst error)`.
pub fn gradcheck_all() -> Vec<(&'static str, f64)> {
    op_cases()
        .iter()
        .map(|case| {
            let worst = (0..INSTANCES as u64)
                .map(|s| (case.check)(1000 + s))
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}

/// Brute-force scalar re-implementations of the attention metrics, written
/// independently of the library (full sorts, explicit loops, textbook
/// formulas) for oracle comparisons.
pub mod oracle {
    /// Indices of the `min(k, q+1)` largest entries of `row[..=q]`, ties to
    /// the lower index, by rank counting.
    pub fn topk_set(row: &[f64], q: usize, k: usize) -> Vec<usize> {
        (0..=q)
            .filter(|&j| {
                let better = (0..=q)
                    .filter(|&i| row[i] > row[j] || (row[i] == row[j] && i < j))
                    .count();
                better < k
            })
            .collect()
    }

    pub fn topk_mass(p: &[f64], n: usize, k: usize) -> f64 {
        let rows: Vec<&[f64]> = p.chunks(n).collect();
        let mut acc = 0.0;
        for (r, row) in rows.iter().enumerate() {
            acc += topk_set(row, r % n, k).iter().map(|&j| row[j]).sum::<f64>();
        }
        acc / rows.len() as f64
    }

    pub fn entropy_ratio(p: &[f64], n: usize) -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for (r, row) in p.chunks(n).enumerate() {
            let q = r % n;
            if q == 0 {
                continue;
            }
            let mut h = 0.0;
            for &x in &row[..=q] {
                if x > 0.0 {
                    h -= x * x.ln();
                }
            }
            acc += h / ((q + 1) as f64).ln();
            count += 1.0;
        }
        acc / count
    }

    pub fn gate_f1(g: &[f64], p: &[f64], n: usize, k: usize) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (r, (gr, pr)) in g.chunks(n).zip(p.chunks(n)).enumerate() {
            let q = r % n;
            let a = topk_set(gr, q, k);
            let b = topk_set(pr, q, k);
            hit += a.iter().filter(|j| b.contains(j)).count();
            total += a.len();
        }
        hit as f64 / total as f64
    }

    pub fn kl_distill(teacher: &[f64], g: &[f64], n: usize) -> f64 {
        let mut acc = 0.0;
        let mut rows = 0.0;
        for (r, (tr, gr)) in teacher.chunks(n).zip(g.chunks(n)).enumerate() {
            let q = r % n;
            let z: f64 = gr[..=q].iter().map(|x| x.exp()).sum();
            for j in 0..=q {
                let qj = gr[j].exp() / z;
                if tr[j] > 0.0 {
                    acc += tr[j] * (tr[j] / qj).ln();
                }
            }
            rows += 1.0;
        }
        acc / rows
    }

    pub fn bce_distill(g: &[f64], target: &[bool], n: usize) -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for (i, (&x, &t)) in g.iter().zip(target).enumerate() {
            let (q, j) = ((i / n) % n, i % n);
            if j > q {
                continue;
            }
            let s = 1.0 / (1.0 + (-x).exp());
            acc -= if t { s.ln() } else { (1.0 - s).ln() };
            count += 1.0;
        }
        acc / count
    }
}
