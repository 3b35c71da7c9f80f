use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::record::{mean_std, FinalValue, RunRecord, Summary, CHECKPOINT_DIR};
use super::train::{evaluate, Arm, Env, EvalPlan, EvalStats, Objective, Optim};
use crate::config::{DistillObjective, Protocol, RunConfig, UnfreezeOrder};
use crate::error::{Error, Result};
use crate::gating::{GateParams, MaskMode};
use crate::metrics::{efficiency, MetricsRecord};
use crate::model::{set_trainable, Checkpoint, ModelParams, RngSnapshot, TrainSelector};

const STOCHASTIC_STREAM: u64 = 0x5707;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run directory. Nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Print one line per evaluation to stderr.
    pub progress: bool,
}

/// Loads the corpus and runs the configured protocol.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let env = Env::load(cfg)?;
    run_with_env(cfg, &env, opts)
}

/// Runs the configured protocol on an already loaded corpus.
pub fn run_with_env(cfg: &RunConfig, env: &Env, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg,
        env,
        opts,
        records: Vec::new(),
        finals: Vec::new(),
        checkpoints: Vec::new(),
    };
    match cfg.protocol.name {
        Protocol::E1Soft => e1_soft(&mut ctx)?,
        Protocol::E2Hard => e2_hard(&mut ctx)?,
        Protocol::E3Contrast => e3_contrast(&mut ctx)?,
        Protocol::E4Stochastic => e4_stochastic(&mut ctx)?,
        Protocol::GateOnly => gate_only(&mut ctx)?,
        Protocol::PosthocDistill => posthoc_distill(&mut ctx)?,
        Protocol::AbsorptionGradient => absorption_gradient(&mut ctx)?,
    }
    let mut summary = Summary::from_finals(cfg.protocol.name.name(), &ctx.finals);
    summary.derived = derive(cfg, &summary);
    let record = RunRecord {
        config: cfg.clone(),
        records: ctx.records,
        finals: ctx.finals,
        summary,
        checkpoints: ctx.checkpoints,
    };
    if let Some(dir) = &opts.out_dir {
        record.write(dir)?;
    }
    Ok(record)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    env: &'a Env,
    opts: &'a RunOptions,
    records: Vec<MetricsRecord>,
    finals: Vec<FinalValue>,
    checkpoints: Vec<PathBuf>,
}

/// The periodic evaluation attached to a training arm.
#[derive(Clone, Debug)]
struct Series {
    mode: MaskMode,
    gate_f1: bool,
}

struct Trained {
    /// `(step, val_ppl)` of every periodic evaluation, step 0 included.
    curve: Vec<(usize, f64)>,
}

impl Ctx<'_> {
    fn k(&self) -> usize {
        self.cfg.protocol.k
    }

    fn steps(&self) -> usize {
        self.cfg.protocol.steps
    }

    fn plan(&self, gate_f1: bool) -> EvalPlan {
        EvalPlan {
            k: self.k(),
            attention_stats: true,
            gate_f1,
        }
    }

    fn final_value(&mut self, arm: &str, seed: u64, metric: &str, value: f64) {
        self.finals.push(FinalValue {
            arm: arm.to_string(),
            seed,
            metric: metric.to_string(),
            value,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn push_record(
        &mut self,
        arm: &str,
        seed: u64,
        step: usize,
        stats: &EvalStats,
        lr: Option<f64>,
        train_loss: Option<f64>,
        gate_grad_norm: Option<f64>,
        wall_ms: u64,
    ) {
        if self.opts.progress {
            eprintln!(
                "[{}] {arm} seed={seed} step={step} val_ppl={:.4}{}",
                self.cfg.protocol.name,
                stats.ppl,
                stats.gate_f1.map(|f| format!(" f1={f:.4}")).unwrap_or_default()
            );
        }
        self.records.push(MetricsRecord {
            protocol: self.cfg.protocol.name.name().to_string(),
            arm: arm.to_string(),
            seed,
            step,
            k: self.k(),
            lr,
            train_loss,
            gate_grad_norm,
            val_loss: stats.loss,
            val_ppl: stats.ppl,
            gate_f1: stats.gate_f1,
            topk_mass: stats.topk_mass.clone(),
            entropy_ratio: stats.entropy_ratio.clone(),
            wall_ms,
        });
    }

    /// Evaluates once at the end of the run and records `val_ppl` (and
    /// `gate_f1` when computed) as finals of `label`.
    fn eval_final(
        &mut self,
        label: &str,
        seed: u64,
        params: &ModelParams,
        gates: Option<&GateParams>,
        mode: &MaskMode,
        gate_f1: bool,
    ) -> Result<EvalStats> {
        let start = Instant::now();
        let stats = evaluate(params, gates, mode, &self.env.valid, self.plan(gate_f1))?;
        let ms = start.elapsed().as_millis() as u64;
        self.push_record(label, seed, self.steps(), &stats, None, None, None, ms);
        self.final_value(label, seed, "val_ppl", stats.ppl);
        if let Some(f1) = stats.gate_f1 {
            self.final_value(label, seed, "gate_f1", f1);
        }
        Ok(stats)
    }

    /// Trains `arm` for the configured number of steps with periodic
    /// evaluation, then records its final `val_ppl` and saves a checkpoint.
    ///
    /// Arms with nothing trainable skip the optimizer but are evaluated at
    /// the same steps as every other arm.
    fn train(&mut self, arm: &mut Arm, seed: u64, objective: Objective, series: &Series) -> Result<Trained> {
        let steps = self.steps();
        let interval = self.cfg.train.eval_interval;
        let optim = Optim::from_config(self.cfg, steps);
        let env = self.env;
        let mut batches = crate::data::Batches::new(env.corpus.train(), env.seq_len, env.batch_size, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STOCHASTIC_STREAM);
        let stochastic = matches!(arm.train_mode, MaskMode::StochasticRandom { .. });
        let trainable = arm.trainable(objective);
        let start = Instant::now();
        let plan = self.plan(series.gate_f1);

        let mut last = evaluate(&arm.params, arm.gates.as_ref(), &series.mode, &env.valid, plan)?;
        let mut curve = vec![(0, last.ppl)];
        self.push_record(&arm.name, seed, 0, &last, None, None, None, 0);
        let (mut loss_sum, mut norm_sum, mut count) = (0.0, 0.0, 0usize);
        let mut have_norm = false;
        for step in 0..steps {
            if trainable {
                let batch = batches.next().expect("endless stream");
                let rng = stochastic.then_some(&mut rng);
                let stats = arm.step(&batch, objective, &optim, step, rng)?;
                if let Some(check) = self.gate_grad_check() {
                    check(stats.gate_grad_max, step)?;
                }
                loss_sum += stats.loss;
                if let Some(n) = stats.gate_grad_norm {
                    norm_sum += n;
                    have_norm = true;
                }
                count += 1;
            }
            let done = step + 1;
            if done % interval == 0 || done == steps {
                last = evaluate(&arm.params, arm.gates.as_ref(), &series.mode, &env.valid, plan)?;
                curve.push((done, last.ppl));
                let mean = |s: f64| (count > 0).then(|| s / count as f64);
                let norm = if have_norm { mean(norm_sum) } else { None };
                let lr = trainable.then(|| optim.model_schedule.lr(step));
                let ms = start.elapsed().as_millis() as u64;
                self.push_record(&arm.name, seed, done, &last, lr, mean(loss_sum), norm, ms);
                (loss_sum, norm_sum, count) = (0.0, 0.0, 0);
            }
            let every = self.cfg.train.checkpoint_interval.unwrap_or(interval);
            if trainable && done % every == 0 && done < steps {
                self.save(arm, seed, Some(done), stochastic.then_some(&rng))?;
            }
        }
        self.final_value(&arm.name, seed, "val_ppl", last.ppl);
        if let Some(f1) = last.gate_f1 {
            self.final_value(&arm.name, seed, "gate_f1", f1);
        }
        if trainable {
            self.save(arm, seed, None, stochastic.then_some(&rng))?;
        }
        Ok(Trained { curve })
    }

    /// E2 enforces the zero-gradient theorem after every backward pass.
    #[allow(clippy::type_complexity)]
    fn gate_grad_check(&self) -> Option<fn(Option<f64>, usize) -> Result<()>> {
        if self.cfg.protocol.name != Protocol::E2Hard {
            return None;
        }
        Some(|max, step| match max {
            Some(m) if m != 0.0 => Err(Error::Invariant(format!(
                "gate gradient under hard top-k is {m:e} at step {step}, expected exactly 0"
            ))),
            _ => Ok(()),
        })
    }

    fn save(&mut self, arm: &Arm, seed: u64, step: Option<usize>, rng: Option<&ChaCha8Rng>) -> Result<()> {
        let Some(root) = &self.opts.out_dir else {
            return Ok(());
        };
        let name = match step {
            Some(s) => format!("{}_seed{seed}_step{s}", arm.name),
            None => format!("{}_seed{seed}", arm.name),
        };
        let dir = root.join(CHECKPOINT_DIR).join(name);
        let mut ckpt = Checkpoint::new(arm.params.clone(), arm.gates.clone());
        ckpt.rng = rng.map(RngSnapshot::capture);
        ckpt.save(&dir)?;
        self.checkpoints.push(dir);
        Ok(())
    }

    fn source(&self, i: usize) -> Result<ModelParams> {
        let path = &self.cfg.protocol.source_checkpoints[i];
        load_source(path, self)
    }

    fn fresh_gates(&self, seed: u64, frozen: bool) -> Result<GateParams> {
        let m = &self.cfg.model;
        let mut g = GateParams::init(m.n_layers, m.n_heads, m.d_model, m.d_gate, seed)?;
        g.frozen = frozen;
        Ok(g)
    }

    /// Mean deploy perplexity over the configured fixed random masks; each
    /// mask seed is recorded as its own final of `label`.
    fn fixed_random(&mut self, label: &str, params: &ModelParams, k: usize) -> Result<f64> {
        let mut ppls = Vec::new();
        for &m in &self.cfg.protocol.mask_seeds.clone() {
            let mode = MaskMode::FixedRandom { k, seed: m };
            ppls.push(self.eval_final(label, m, params, None, &mode, false)?.ppl);
        }
        Ok(mean_std(&ppls).0)
    }
}

fn load_source(path: &Path, ctx: &Ctx<'_>) -> Result<ModelParams> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.config != ctx.cfg.model {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    Ok(ckpt.model)
}

fn start_params(ctx: &Ctx<'_>, seed: u64) -> Result<ModelParams> {
    if ctx.cfg.protocol.source_checkpoints.is_empty() {
        ModelParams::init(&ctx.cfg.model, seed)
    } else {
        ctx.source(0)
    }
}

fn e1_soft(ctx: &mut Ctx<'_>) -> Result<()> {
    for &seed in &ctx.cfg.protocol.seeds.clone() {
        if ctx.cfg.protocol.dense_baseline {
            let mut dense = Arm::new("dense", start_params(ctx, seed)?, None, MaskMode::Dense);
            set_trainable(&mut dense.params, None, &TrainSelector::All)?;
            let series = Series {
                mode: MaskMode::Dense,
                gate_f1: false,
            };
            ctx.train(&mut dense, seed, Objective::Task, &series)?;
        }
        for (name, mode, frozen) in [
            ("learned", MaskMode::SoftLearned, false),
            ("random", MaskMode::SoftRandom, true),
        ] {
            let mut params = start_params(ctx, seed)?;
            set_trainable(&mut params, None, &TrainSelector::All)?;
            let gates = ctx.fresh_gates(seed, frozen)?;
            let mut arm = Arm::new(name, params, Some(gates), mode.clone());
            let series = Series { mode, gate_f1: true };
            ctx.train(&mut arm, seed, Objective::Task, &series)?;
        }
    }
    Ok(())
}

fn e2_hard(ctx: &mut Ctx<'_>) -> Result<()> {
    let k = ctx.k();
    for &seed in &ctx.cfg.protocol.seeds.clone() {
        for (name, frozen) in [("learned", false), ("random", true)] {
            let mut params = ModelParams::init(&ctx.cfg.model, seed)?;
            set_trainable(&mut params, None, &TrainSelector::All)?;
            let gates = ctx.fresh_gates(seed, frozen)?;
            let mode = MaskMode::HardTopK { k };
            let mut arm = Arm::new(name, params, Some(gates), mode.clone());
            let series = Series { mode, gate_f1: true };
            ctx.train(&mut arm, seed, Objective::Task, &series)?;
        }
    }
    Ok(())
}

fn e3_contrast(ctx: &mut Ctx<'_>) -> Result<()> {
    let k = ctx.k();
    for (i, source) in ["dense_source", "soft_source"].into_iter().enumerate() {
        let params = ctx.source(i)?;
        ctx.eval_final(&format!("{source}@dense"), 0, &params, None, &MaskMode::Dense, false)?;
        for &seed in &ctx.cfg.protocol.seeds.clone() {
            let mut frozen = params.clone();
            set_trainable(&mut frozen, None, &TrainSelector::None)?;
            let gates = ctx.fresh_gates(seed, false)?;
            let mut arm = Arm::new(source, frozen, Some(gates), MaskMode::HardTopK { k });
            let series = Series {
                mode: MaskMode::HardTopK { k },
                gate_f1: true,
            };
            let objective = Objective::Distill {
                kind: DistillObjective::Bce,
                k,
            };
            ctx.train(&mut arm, seed, objective, &series)?;
        }
    }
    Ok(())
}

fn e4_stochastic(ctx: &mut Ctx<'_>) -> Result<()> {
    let k = ctx.k();
    for &seed in &ctx.cfg.protocol.seeds.clone() {
        if ctx.cfg.protocol.dense_baseline {
            let mut dense = Arm::new("dense", start_params(ctx, seed)?, None, MaskMode::Dense);
            set_trainable(&mut dense.params, None, &TrainSelector::All)?;
            let series = Series {
                mode: MaskMode::Dense,
                gate_f1: false,
            };
            ctx.train(&mut dense, seed, Objective::Task, &series)?;
        }
        let mut params = start_params(ctx, seed)?;
        set_trainable(&mut params, None, &TrainSelector::All)?;
        let mut arm = Arm::new("stochastic", params, None, MaskMode::StochasticRandom { k });
        // the periodic series tracks the deployed-dense behaviour
        let series = Series {
            mode: MaskMode::Dense,
            gate_f1: false,
        };
        ctx.train(&mut arm, seed, Objective::Task, &series)?;
        let mut ppls = Vec::new();
        for &m in &ctx.cfg.protocol.mask_seeds.clone() {
            let mode = MaskMode::FixedRandom { k, seed: m };
            let label = format!("stochastic@fixed_random_m{m}");
            ppls.push(ctx.eval_final(&label, seed, &arm.params, None, &mode, false)?.ppl);
        }
        ctx.final_value("stochastic@fixed_random", seed, "val_ppl", mean_std(&ppls).0);
    }
    Ok(())
}

/// First step whose perplexity improvement reaches 99% of the final one.
pub fn convergence_step(curve: &[(usize, f64)]) -> Option<usize> {
    let (&(_, first), &(_, last)) = (curve.first()?, curve.last()?);
    let total = first - last;
    if total <= 0.0 {
        return None;
    }
    curve.iter().find(|(_, p)| first - p >= 0.99 * total).map(|(s, _)| *s)
}

fn gate_only(ctx: &mut Ctx<'_>) -> Result<()> {
    let k = ctx.k();
    let hard = MaskMode::HardTopK { k };
    let source = ctx.source(0)?;
    ctx.eval_final("dense", 0, &source, None, &MaskMode::Dense, false)?;
    ctx.eval_final("oracle", 0, &source, None, &MaskMode::Oracle { k }, false)?;
    ctx.fixed_random("fixed_random", &source, k)?;
    for &seed in &ctx.cfg.protocol.seeds.clone() {
        for (name, frozen) in [("learned", false), ("random", true)] {
            let mut params = source.clone();
            let mut gates = ctx.fresh_gates(seed, frozen)?;
            set_trainable(&mut params, Some(&mut gates), &TrainSelector::GateOnly)?;
            gates.frozen = frozen;
            let mut arm = Arm::new(name, params, Some(gates), MaskMode::SoftLearned);
            let series = Series {
                mode: hard.clone(),
                gate_f1: true,
            };
            let trained = ctx.train(&mut arm, seed, Objective::Task, &series)?;
            if !frozen {
                if let Some(step) = convergence_step(&trained.curve) {
                    ctx.final_value(name, seed, "convergence_step", step as f64);
                }
                ctx.eval_final(
                    "learned@soft",
                    seed,
                    &arm.params,
                    arm.gates.as_ref(),
                    &MaskMode::SoftLearned,
                    false,
                )?;
            }
        }
    }
    Ok(())
}

fn posthoc_distill(ctx: &mut Ctx<'_>) -> Result<()> {
    let k = ctx.k();
    let source = ctx.source(0)?;
    let ks = ctx.cfg.protocol.k_values();
    ctx.eval_final("dense", 0, &source, None, &MaskMode::Dense, false)?;
    for &kk in &ks {
        ctx.eval_final(
            &format!("oracle@k{kk}"),
            0,
            &source,
            None,
            &MaskMode::Oracle { k: kk },
            false,
        )?;
        ctx.fixed_random(&format!("fixed_random@k{kk}"), &source, kk)?;
    }
    let objective = Objective::Distill {
        kind: ctx.cfg.protocol.objective,
        k,
    };
    for &seed in &ctx.cfg.protocol.seeds.clone() {
        let mut params = source.clone();
        let mut gates = ctx.fresh_gates(seed, false)?;
        set_trainable(&mut params, Some(&mut gates), &TrainSelector::GateOnly)?;
        let mut arm = Arm::new("distilled", params, Some(gates), MaskMode::HardTopK { k });
        let series = Series {
            mode: MaskMode::HardTopK { k },
            gate_f1: true,
        };
        ctx.train(&mut arm, seed, objective, &series)?;
        for &kk in &ks {
            let label = format!("distilled@k{kk}");
            let plan = EvalPlan {
                k: kk,
                attention_stats: true,
                gate_f1: true,
            };
            let stats = evaluate(
                &arm.params,
                arm.gates.as_ref(),
                &MaskMode::HardTopK { k: kk },
                &ctx.env.valid,
                plan,
            )?;
            ctx.push_record(&label, seed, ctx.steps(), &stats, None, None, None, 0);
            ctx.final_value(&label, seed, "val_ppl", stats.ppl);
            if let Some(f1) = stats.gate_f1 {
                ctx.final_value(&label, seed, "gate_f1", f1);
            }
        }
    }
    Ok(())
}

fn sweep_layers(ctx: &Ctx<'_>, n: usize) -> TrainSelector {
    let l = ctx.cfg.model.n_layers;
    let layers: BTreeSet<usize> = match ctx.cfg.protocol.unfreeze {
        UnfreezeOrder::Last => (l - n..l).collect(),
        UnfreezeOrder::First => (0..n).collect(),
    };
    TrainSelector::AttnLayers(layers)
}

pub(crate) fn sweep_values(cfg: &RunConfig) -> Vec<usize> {
    if cfg.protocol.n_unfrozen.is_empty() {
        (0..=cfg.model.n_layers).collect()
    } else {
        cfg.protocol.n_unfrozen.clone()
    }
}

fn absorption_gradient(ctx: &mut Ctx<'_>) -> Result<()> {
    let k = ctx.k();
    let source = ctx.source(0)?;
    ctx.eval_final("dense", 0, &source, None, &MaskMode::Dense, false)?;
    for &seed in &ctx.cfg.protocol.seeds.clone() {
        for n in sweep_values(ctx.cfg) {
            let selector = sweep_layers(ctx, n);
            let mut arms = vec![
                (format!("learned_n{n}"), MaskMode::SoftLearned, Some(false)),
                (format!("random_n{n}"), MaskMode::SoftRandom, Some(true)),
            ];
            if ctx.cfg.protocol.no_gate_control {
                arms.push((format!("nogate_n{n}"), MaskMode::Dense, None));
            }
            for (name, mode, frozen) in arms {
                let mut params = source.clone();
                set_trainable(&mut params, None, &selector)?;
                let gates = match frozen {
                    Some(f) => Some(ctx.fresh_gates(seed, f)?),
                    None => None,
                };
                let mut arm = Arm::new(name.clone(), params, gates, mode.clone());
                let series = Series {
                    mode,
                    gate_f1: frozen.is_some(),
                };
                ctx.train(&mut arm, seed, Objective::Task, &series)?;
                if frozen.is_some() {
                    let label = format!("{name}@hard_topk");
                    ctx.eval_final(
                        &label,
                        seed,
                        &arm.params,
                        arm.gates.as_ref(),
                        &MaskMode::HardTopK { k },
                        false,
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Protocol-level quantities from the summary means.
pub(crate) fn derive(cfg: &RunConfig, s: &Summary) -> BTreeMap<String, f64> {
    let mut d = BTreeMap::new();
    let ppl = |arm: &str| s.mean(arm, "val_ppl");
    match cfg.protocol.name {
        Protocol::E1Soft => {
            if let (Some(l), Some(r)) = (ppl("learned"), ppl("random")) {
                d.insert("learned_minus_random".into(), l - r);
                if let Some(dense) = ppl("dense") {
                    d.insert("random_minus_dense".into(), r - dense);
                    d.insert("captured_fraction".into(), (r - l) / (r - dense));
                }
            }
        }
        Protocol::E2Hard => {
            if let (Some(l), Some(r)) = (ppl("learned"), s.row("random", "val_ppl")) {
                d.insert("abs_learned_minus_random".into(), (l - r.mean).abs());
                d.insert("random_std".into(), r.std);
            }
        }
        Protocol::E3Contrast => {
            for src in ["dense_source", "soft_source"] {
                if let (Some(p), Some(base)) = (ppl(src), ppl(&format!("{src}@dense"))) {
                    d.insert(format!("{src}_deploy_minus_dense"), p - base);
                }
            }
        }
        Protocol::E4Stochastic => {
            if let (Some(st), Some(dense)) = (s.row("stochastic", "val_ppl"), s.row("dense", "val_ppl")) {
                let diffs: Vec<f64> = st
                    .seeds
                    .iter()
                    .zip(&st.values)
                    .filter_map(|(seed, v)| {
                        let i = dense.seeds.iter().position(|x| x == seed)?;
                        Some(v - dense.values[i])
                    })
                    .collect();
                let (m, sd) = mean_std(&diffs);
                d.insert("deploy_dense_minus_baseline".into(), m);
                d.insert("deploy_dense_minus_baseline_std".into(), sd);
            }
        }
        Protocol::GateOnly => {
            if let (Some(l), Some(r), Some(o)) = (ppl("learned"), ppl("random"), ppl("oracle")) {
                d.insert("random_minus_learned".into(), r - l);
                if let Some(e) = efficiency(l, r, o) {
                    d.insert("efficiency_vs_random_gate".into(), e);
                }
            }
            if let (Some(l), Some(fr), Some(o)) = (ppl("learned"), ppl("fixed_random"), ppl("oracle")) {
                if let Some(e) = efficiency(l, fr, o) {
                    d.insert("efficiency_vs_fixed_random".into(), e);
                }
            }
        }
        Protocol::PosthocDistill => {
            for kk in cfg.protocol.k_values() {
                let get = |a: &str| ppl(&format!("{a}@k{kk}"));
                if let (Some(g), Some(r), Some(o)) = (get("distilled"), get("fixed_random"), get("oracle")) {
                    if let Some(e) = efficiency(g, r, o) {
                        d.insert(format!("efficiency_k{kk}"), e);
                    }
                }
            }
        }
        Protocol::AbsorptionGradient => {
            for n in sweep_values(cfg) {
                if let (Some(l), Some(r)) = (ppl(&format!("learned_n{n}")), ppl(&format!("random_n{n}"))) {
                    d.insert(format!("gap_n{n}"), r - l);
                }
                let hard = |a: &str| ppl(&format!("{a}_n{n}@hard_topk"));
                if let (Some(l), Some(r)) = (hard("learned"), hard("random")) {
                    d.insert(format!("hard_gap_n{n}"), r - l);
                }
                if let (Some(l), Some(ng)) = (ppl(&format!("learned_n{n}")), ppl(&format!("nogate_n{n}"))) {
                    d.insert(format!("gate_overhead_n{n}"), l - ng);
                }
            }
        }
    }
    d
}
