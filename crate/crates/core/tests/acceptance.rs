//! Acceptance run: one PASS/FAIL line per criterion on the desk preset.
//!
//! Set `ABSORBKIT_ACCEPT_QUICK=1` for a plumbing check with tiny step
//! counts; its verdicts on the training criteria are not meaningful.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use absorbkit::config::{Protocol, ProtocolConfig, RunConfig};
use absorbkit::data::Batches;
use absorbkit::experiments::{evaluate, mean_std, run_with_env, Env, EvalPlan, RunOptions, RunRecord, METRICS_CSV};
use absorbkit::gating::{topk_mask, GateParams, MaskMode};
use absorbkit::metrics::{bce_distill_loss, entropy_ratio, gate_f1, kl_distill_loss, topk_mass};
use absorbkit::model::{count_params, forward, Checkpoint, ForwardOptions, ModelConfig, ModelParams};
use absorbkit::tensor::Tape;
use common::{oracle, rand_tensor, random_causal_distribution, rng};
use rand::Rng;

struct Budget {
    /// E1 arms, the shared dense baseline and E4.
    joint: usize,
    e2: usize,
    gate_only: usize,
    sweep: usize,
    eval_interval: usize,
}

impl Budget {
    fn from_env() -> (Self, bool) {
        let quick = std::env::var("ABSORBKIT_ACCEPT_QUICK").is_ok_and(|v| v == "1");
        let b = if quick {
            Budget {
                joint: 12,
                e2: 6,
                gate_only: 12,
                sweep: 6,
                eval_interval: 6,
            }
        } else {
            Budget {
                joint: 800,
                e2: 300,
                gate_only: 1000,
                sweep: 400,
                eval_interval: 200,
            }
        };
        (b, quick)
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const SEEDS: [u64; 3] = [0, 1, 2];
const K: usize = 16;

fn config(protocol: Protocol, seeds: &[u64], steps: usize, budget: &Budget) -> RunConfig {
    let mut cfg = RunConfig::new(ProtocolConfig::new(protocol, seeds.to_vec(), steps));
    cfg.train.eval_interval = budget.eval_interval;
    cfg
}

fn run(cfg: &RunConfig, env: &Env, out: Option<&Path>) -> RunRecord {
    let opts = RunOptions {
        out_dir: out.map(Path::to_path_buf),
        progress: false,
    };
    run_with_env(cfg, env, &opts).expect("protocol runs")
}

/// Final `val_ppl` of `arm` per seed, in seed order.
fn finals(record: &RunRecord, arm: &str) -> Vec<(u64, f64)> {
    let mut v: Vec<(u64, f64)> = record
        .finals
        .iter()
        .filter(|f| f.arm == arm && f.metric == "val_ppl")
        .map(|f| (f.seed, f.value))
        .collect();
    v.sort_by_key(|p| p.0);
    v
}

fn values(pairs: &[(u64, f64)]) -> Vec<f64> {
    pairs.iter().map(|p| p.1).collect()
}

fn c1_gradients() -> Outcome {
    let results = common::gradcheck_all();
    let worst = results
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = results.iter().all(|(_, e)| *e <= common::REL_TOL);
    outcome(
        pass,
        format!(
            "{} ops x {} instances, h={:e}; worst rel err {:.2e} ({})",
            results.len(),
            common::INSTANCES,
            common::H,
            worst.1,
            worst.0
        ),
    )
}

fn c2_zero_gradient(env: &Env) -> Outcome {
    let cfg = ModelConfig::desk();
    let mut max_hard = 0.0f64;
    let mut min_soft = f64::INFINITY;
    let mut count = 0usize;
    for seed in 0..3u64 {
        let params = ModelParams::init(&cfg, seed).expect("init");
        let gates = GateParams::init(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_gate, seed).expect("gates");
        let batch = Batches::new(env.corpus.train(), cfg.seq_len, 4, seed)
            .expect("batches")
            .next()
            .expect("batch");
        for (mode, hard) in [(MaskMode::HardTopK { k: K }, true), (MaskMode::SoftLearned, false)] {
            let mut tape = Tape::new();
            let out = forward(
                &mut tape,
                &params,
                Some(&gates),
                &mode,
                &batch.tokens,
                batch.batch,
                ForwardOptions::default(),
            )
            .expect("forward");
            let loss = tape.cross_entropy(out.logits, &batch.targets).expect("loss");
            tape.backward(loss).expect("backward");
            let grads: Vec<f64> = out
                .params
                .gate_query
                .iter()
                .chain(&out.params.gate_key)
                .flat_map(|&v| tape.grad(v).expect("gate grad").to_vec())
                .collect();
            if hard {
                count += grads.len();
                max_hard = grads.iter().fold(max_hard, |m, g| m.max(g.abs()));
            } else {
                min_soft = min_soft.min(grads.iter().map(|g| g * g).sum::<f64>().sqrt());
            }
        }
    }
    outcome(
        max_hard == 0.0 && min_soft > 0.0,
        format!("hard: max |grad| = {max_hard:e} over {count} elements; soft: min norm = {min_soft:.3e}"),
    )
}

fn c3_dense_equivalence(env: &Env) -> Outcome {
    let cfg = ModelConfig::desk();
    let params = ModelParams::init(&cfg, 7).expect("init");
    let gates = GateParams::init(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_gate, 7).expect("gates");
    let plan = EvalPlan {
        k: K,
        attention_stats: false,
        gate_f1: false,
    };
    let batches = &env.valid[..2];
    let dense = evaluate(&params, None, &MaskMode::Dense, batches, plan)
        .expect("dense")
        .ppl;
    let mut worst = 0.0f64;
    for k in [cfg.seq_len, cfg.seq_len + 72] {
        for mode in [
            MaskMode::HardTopK { k },
            MaskMode::Oracle { k },
            MaskMode::FixedRandom { k, seed: 3 },
        ] {
            let ppl = evaluate(&params, Some(&gates), &mode, batches, plan).expect("eval").ppl;
            worst = worst.max((ppl - dense).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("dense ppl {dense:.6}; max |ppl - dense| = {worst:e}"),
    )
}

fn c10_metric_oracles() -> Outcome {
    let n = 4;
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = rng(9000 + seed);
        let p = random_causal_distribution(&mut r, &[1], n);
        let g = rand_tensor(&[1, n, n], &mut r, 2.0);
        let k = r.random_range(1..=n);
        let mut diff = |a: f64, b: f64| worst = worst.max((a - b).abs());
        diff(topk_mass(&p, k).unwrap(), oracle::topk_mass(p.data(), n, k));
        diff(entropy_ratio(&p).unwrap(), oracle::entropy_ratio(p.data(), n));
        diff(gate_f1(&g, &p, k).unwrap(), oracle::gate_f1(g.data(), p.data(), n, k));
        let mut tape = Tape::new();
        let gv = tape.leaf(g.clone(), true);
        let kl = kl_distill_loss(&mut tape, &p, gv).unwrap();
        diff(tape.value(kl).data()[0], oracle::kl_distill(p.data(), g.data(), n));
        let target = topk_mask(&p, k).unwrap();
        let bce = bce_distill_loss(&mut tape, gv, &target).unwrap();
        diff(
            tape.value(bce).data()[0],
            oracle::bce_distill(g.data(), target.keep(), n),
        );
    }
    let reference = count_params(&ModelConfig::reference());
    let ratio = reference.qkv_to_gate_ratio.unwrap_or(f64::NAN);
    outcome(
        worst <= 1e-12 && reference.gate_params == 393_216 && (ratio - 3.0).abs() < 1e-12,
        format!(
            "max |lib - oracle| = {worst:.2e} over 50 4x4 instances; reference gate params {}, ratio {ratio}",
            reference.gate_params
        ),
    )
}

fn c11_determinism(env: &Env, tmp: &Path) -> Outcome {
    let mut cfg = RunConfig::new(ProtocolConfig::new(Protocol::E1Soft, vec![4], 6));
    cfg.train.eval_interval = 3;
    let a = tmp.join("det_a");
    let b = tmp.join("det_b");
    run(&cfg, env, Some(&a));
    run(&cfg, env, Some(&b));
    let read = |d: &PathBuf| std::fs::read(d.join(METRICS_CSV)).expect("metrics.csv");
    let csv_same = read(&a) == read(&b);

    let ckpt_dir = a.join("checkpoints").join("learned_seed4");
    let ckpt = Checkpoint::load(&ckpt_dir).expect("load");
    let again = tmp.join("resaved");
    ckpt.save(&again).expect("save");
    let reloaded = Checkpoint::load(&again).expect("reload");
    let bytes_same =
        std::fs::read(ckpt_dir.join("tensors.bin")).unwrap() == std::fs::read(again.join("tensors.bin")).unwrap();
    let ckpt_same = ckpt.bit_eq(&reloaded) && bytes_same;
    outcome(
        csv_same && ckpt_same,
        format!("metrics.csv identical: {csv_same}; checkpoint round-trip bitwise: {ckpt_same}"),
    )
}

fn c4_mask_ordering(env: &Env, dense_ckpt: &Path) -> Outcome {
    let params = Checkpoint::load(dense_ckpt).expect("dense checkpoint").model;
    let plan = EvalPlan {
        k: K,
        attention_stats: false,
        gate_f1: false,
    };
    let ppl = |mode: MaskMode| evaluate(&params, None, &mode, &env.valid, plan).expect("eval").ppl;
    let dense = ppl(MaskMode::Dense);
    let oracle = ppl(MaskMode::Oracle { k: K });
    let fr: Vec<f64> = (0..5).map(|seed| ppl(MaskMode::FixedRandom { k: K, seed })).collect();
    let (fr_mean, fr_sd) = mean_std(&fr);
    let gap = fr_mean - oracle;
    let ordered = dense <= oracle && fr.iter().all(|&f| oracle <= f);
    outcome(
        ordered && gap > 3.0 * fr_sd,
        format!(
            "dense {dense:.4} <= oracle {oracle:.4} <= fixed_random {fr_mean:.4} +- {fr_sd:.4} (5 mask seeds); gap {gap:.4} vs 3sd {:.4}",
            3.0 * fr_sd
        ),
    )
}

fn c5_gate_only(env: &Env, dense_ckpt: &Path, budget: &Budget) -> Outcome {
    let mut cfg = config(Protocol::GateOnly, &[0], budget.gate_only, budget);
    cfg.protocol.source_checkpoints = vec![dense_ckpt.to_path_buf()];
    let record = run(&cfg, env, None);
    let get = |arm: &str| record.summary.mean(arm, "val_ppl").expect(arm);
    let (learned, random, oracle) = (get("learned"), get("random"), get("oracle"));
    let closed = (random - learned) / (random - oracle);
    outcome(
        learned < random && closed >= 0.5,
        format!(
            "{} gate steps: learned {learned:.4}, random gate {random:.4}, oracle {oracle:.4}; closes {:.1}% of the gap",
            budget.gate_only,
            100.0 * closed
        ),
    )
}

fn c6_absorption(e1: &RunRecord) -> Outcome {
    let dense = values(&finals(e1, "dense"));
    let learned = values(&finals(e1, "learned"));
    let random = values(&finals(e1, "random"));
    let ratios: Vec<f64> = (0..dense.len())
        .map(|i| (random[i] - learned[i]) / (random[i] - dense[i]))
        .collect();
    let (dm, ds) = mean_std(&dense);
    let (lm, ls) = mean_std(&learned);
    let (rm, rs) = mean_std(&random);
    let denom = rm - dm;
    let ratio = (rm - lm) / denom;
    let (pm, ps) = mean_std(&ratios);
    outcome(
        denom > 0.0 && ratio < 0.5,
        format!(
            "dense {dm:.4}+-{ds:.4}, learned {lm:.4}+-{ls:.4}, random {rm:.4}+-{rs:.4}; random - dense {denom:.4} (needs > 0); ratio of means {ratio:.3} (per seed {pm:.3}+-{ps:.3})"
        ),
    )
}

fn c7_e2(env: &Env, budget: &Budget) -> Outcome {
    let cfg = config(Protocol::E2Hard, &SEEDS, budget.e2, budget);
    let record = run(&cfg, env, None);
    let (lm, ls) = mean_std(&values(&finals(&record, "learned")));
    let (rm, rs) = mean_std(&values(&finals(&record, "random")));
    let diff = (lm - rm).abs();
    outcome(
        diff < rs,
        format!("learned {lm:.4}+-{ls:.4}, random {rm:.4}+-{rs:.4}; |diff| {diff:e} vs random sd {rs:.4}"),
    )
}

fn c8_e4(env: &Env, e1: &RunRecord, budget: &Budget) -> Outcome {
    let mut cfg = config(Protocol::E4Stochastic, &SEEDS, budget.joint, budget);
    cfg.protocol.dense_baseline = false;
    let record = run(&cfg, env, None);
    let stochastic = finals(&record, "stochastic");
    let dense = finals(e1, "dense");
    let diffs: Vec<f64> = stochastic.iter().zip(&dense).map(|(s, d)| s.1 - d.1).collect();
    let (m, sd) = mean_std(&diffs);
    let (sm, _) = mean_std(&values(&stochastic));
    let (dm, _) = mean_std(&values(&dense));
    outcome(
        m > 3.0 * sd && diffs.iter().all(|&d| d > 0.0),
        format!(
            "deployed dense {sm:.4} vs baseline {dm:.4}; paired diff {m:.4} +- {sd:.4} (3sd {:.4})",
            3.0 * sd
        ),
    )
}

fn c9_sweep(env: &Env, dense_ckpt: &Path, budget: &Budget) -> Outcome {
    let mut cfg = config(Protocol::AbsorptionGradient, &[0], budget.sweep, budget);
    cfg.protocol.source_checkpoints = vec![dense_ckpt.to_path_buf()];
    let layers = cfg.model.n_layers;
    let record = run(&cfg, env, None);
    let gaps: Vec<f64> = (0..=layers)
        .map(|n| record.summary.derived[&format!("gap_n{n}")])
        .collect();
    let inversions = gaps.windows(2).filter(|w| w[1] > w[0]).count();
    let shown: Vec<String> = gaps.iter().enumerate().map(|(n, g)| format!("n={n}: {g:.4}")).collect();
    outcome(
        gaps[0] > gaps[layers] && inversions <= 1,
        format!("gap (random - learned) {}; inversions {inversions}", shown.join(", ")),
    )
}

fn report(id: usize, name: &str, start: Instant, o: &Outcome, failures: &mut Vec<usize>) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        failures.push(id);
    }
    println!(
        "criterion {id:>2} {verdict} [{name}] {} ({:.0}s)",
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

fn main() {
    let (budget, quick) = Budget::from_env();
    let tmp = tempfile::tempdir().expect("tempdir");
    let base = RunConfig::new(ProtocolConfig::new(Protocol::E1Soft, SEEDS.to_vec(), budget.joint));
    let env = Env::load(&base).expect("corpus");
    println!(
        "acceptance: desk preset, {} training bytes, k={K}, n={}{}",
        env.corpus.train().len(),
        base.model.seq_len,
        if quick { ", QUICK budgets" } else { "" }
    );
    let mut failures = Vec::new();

    let t = Instant::now();
    report(1, "gradient soundness", t, &c1_gradients(), &mut failures);
    let t = Instant::now();
    report(2, "zero-gradient theorem", t, &c2_zero_gradient(&env), &mut failures);
    let t = Instant::now();
    report(3, "dense equivalence", t, &c3_dense_equivalence(&env), &mut failures);
    let t = Instant::now();
    report(10, "metric oracles", t, &c10_metric_oracles(), &mut failures);
    let t = Instant::now();
    report(
        11,
        "determinism and persistence",
        t,
        &c11_determinism(&env, tmp.path()),
        &mut failures,
    );

    let t = Instant::now();
    let e1_dir = tmp.path().join("e1");
    let e1 = run(
        &config(Protocol::E1Soft, &SEEDS, budget.joint, &budget),
        &env,
        Some(&e1_dir),
    );
    report(6, "absorption signature (E1)", t, &c6_absorption(&e1), &mut failures);
    let dense_ckpt = e1_dir.join("checkpoints").join("dense_seed0");

    let t = Instant::now();
    report(
        4,
        "mask ordering",
        t,
        &c4_mask_ordering(&env, &dense_ckpt),
        &mut failures,
    );
    let t = Instant::now();
    report(
        5,
        "gate-only decoupling",
        t,
        &c5_gate_only(&env, &dense_ckpt, &budget),
        &mut failures,
    );
    let t = Instant::now();
    report(
        9,
        "absorption gradient",
        t,
        &c9_sweep(&env, &dense_ckpt, &budget),
        &mut failures,
    );
    let t = Instant::now();
    report(8, "E4 degradation", t, &c8_e4(&env, &e1, &budget), &mut failures);
    let t = Instant::now();
    report(7, "E2 equivalence", t, &c7_e2(&env, &budget), &mut failures);

    if failures.is_empty() {
        println!("acceptance: all 11 criteria PASS");
    } else {
        failures.sort_unstable();
        println!("acceptance: FAIL on criteria {failures:?}");
        std::process::exit(1);
    }
}
