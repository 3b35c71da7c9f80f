use rand_chacha::ChaCha8Rng;

use super::optim::{AdamState, AdamW, Schedule};
use crate::config::{DistillObjective, RunConfig};
use crate::data::{synthetic_text, validation_batches, Batch, Corpus};
use crate::error::{Error, Result};
use crate::gating::{gate_scores, oracle_mask, GateParams, MaskMode};
use crate::metrics::{bce_distill_loss, entropy_ratio, f1_counts, kl_distill_loss, topk_mass};
use crate::model::{forward, AttnTrace, ForwardOptions, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

/// Corpus and fixed validation batches shared by every arm of a run.
pub struct Env {
    pub corpus: Corpus,
    pub valid: Vec<Batch>,
    pub seq_len: usize,
    pub batch_size: usize,
}

impl Env {
    pub fn load(cfg: &RunConfig) -> Result<Env> {
        let d = &cfg.data;
        let corpus = match &d.path {
            Some(p) => crate::data::load_corpus(p, d.tokenizer, d.valid_fraction)?,
            None => {
                let text = synthetic_text(d.synthetic_bytes, d.synthetic_seed);
                Corpus::from_bytes(text.as_bytes(), d.tokenizer, d.valid_fraction)?
            }
        };
        Self::from_corpus(cfg, corpus)
    }

    pub fn from_corpus(cfg: &RunConfig, corpus: Corpus) -> Result<Env> {
        if corpus.vocab_size > cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary {} exceeds model vocab_size {}",
                corpus.vocab_size, cfg.model.vocab_size
            )));
        }
        let n = cfg.model.seq_len;
        let valid = validation_batches(corpus.valid(), n, cfg.data.batch_size, cfg.data.eval_batches)?;
        Ok(Env {
            corpus,
            valid,
            seq_len: n,
            batch_size: cfg.data.batch_size,
        })
    }
}

/// Optimizers and schedules for one arm.
#[derive(Clone, Copy, Debug)]
pub struct Optim {
    pub model: AdamW,
    pub gate: AdamW,
    pub model_schedule: Schedule,
    pub gate_schedule: Schedule,
}

impl Optim {
    pub fn from_config(cfg: &RunConfig, steps: usize) -> Self {
        let t = &cfg.train;
        Optim {
            model: AdamW::from_config(t, t.weight_decay),
            gate: AdamW::from_config(t, t.gate_weight_decay),
            model_schedule: Schedule::new(t.lr, steps, t.warmup_frac, t.min_lr_frac),
            gate_schedule: Schedule::new(t.gate_lr.unwrap_or(t.lr), steps, t.warmup_frac, t.min_lr_frac),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Next-token cross-entropy through the arm's mask mode.
    Task,
    /// Gate-only distillation against the frozen model's dense attention.
    Distill { kind: DistillObjective, k: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Largest absolute gate-gradient entry, when the gate is trainable.
    pub gate_grad_max: Option<f64>,
    pub gate_grad_norm: Option<f64>,
}

/// One trained configuration: weights, gate, mode and optimizer state.
pub struct Arm {
    pub name: String,
    pub params: ModelParams,
    pub gates: Option<GateParams>,
    pub train_mode: MaskMode,
    model_state: Vec<AdamState>,
    gate_state: Vec<AdamState>,
    tape: Tape,
}

impl Arm {
    pub fn new(name: impl Into<String>, params: ModelParams, gates: Option<GateParams>, train_mode: MaskMode) -> Self {
        let model_state = vec![AdamState::default(); params.params.len()];
        let gate_state = vec![AdamState::default(); gates.as_ref().map_or(0, |g| 2 * g.n_layers)];
        Arm {
            name: name.into(),
            params,
            gates,
            train_mode,
            model_state,
            gate_state,
            tape: Tape::new(),
        }
    }

    fn gate_trainable(&self) -> bool {
        self.gates.as_ref().is_some_and(|g| !g.frozen)
    }

    /// Whether an optimizer step can change anything.
    pub fn trainable(&self, objective: Objective) -> bool {
        match objective {
            Objective::Task => self.params.any_trainable() || (self.gate_trainable() && self.train_mode.needs_gates()),
            Objective::Distill { .. } => self.gate_trainable(),
        }
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn step(
        &mut self,
        batch: &Batch,
        objective: Objective,
        optim: &Optim,
        step: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepStats> {
        self.tape.clear();
        let (loss, model_vars, gate_vars) = match objective {
            Objective::Task => {
                let out = forward(
                    &mut self.tape,
                    &self.params,
                    self.gates.as_ref(),
                    &self.train_mode,
                    &batch.tokens,
                    batch.batch,
                    ForwardOptions {
                        retain_trace: false,
                        rng,
                    },
                )?;
                let loss = self.tape.cross_entropy(out.logits, &batch.targets)?;
                let gates: Vec<Var> = out
                    .params
                    .gate_query
                    .iter()
                    .chain(&out.params.gate_key)
                    .copied()
                    .collect();
                (loss, out.params.model, gates)
            }
            Objective::Distill { kind, k } => {
                let gates = self
                    .gates
                    .as_ref()
                    .ok_or_else(|| Error::Config("distillation needs gate parameters".into()))?;
                let trace = dense_trace(&self.params, &batch.tokens, batch.batch)?;
                let (loss, q, kv) = distill_loss(&mut self.tape, gates, &trace, kind, k)?;
                (loss, Vec::new(), q.into_iter().chain(kv).collect())
            }
        };
        let value = self.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        self.tape.backward(loss)?;

        let lr = optim.model_schedule.lr(step);
        for (i, var) in model_vars.iter().enumerate() {
            let p = &mut self.params.params[i];
            if !p.trainable {
                continue;
            }
            let grad = self.tape.grad(*var).expect("trainable leaf has a gradient");
            let decay = p.value.shape().len() >= 2;
            optim
                .model
                .step(p.value.data_mut(), grad, &mut self.model_state[i], lr, decay);
        }

        let mut stats = StepStats {
            loss: value,
            ..Default::default()
        };
        if self.gate_trainable() && !gate_vars.is_empty() {
            let glr = optim.gate_schedule.lr(step);
            let gates = self.gates.as_mut().expect("checked");
            let layers = gates.n_layers;
            let (mut max, mut sq) = (0.0f64, 0.0f64);
            for (j, var) in gate_vars.iter().enumerate() {
                let grad = self.tape.grad(*var).expect("unfrozen gate has a gradient");
                for g in grad {
                    max = max.max(g.abs());
                    sq += g * g;
                }
                let t = if j < layers {
                    &mut gates.query[j]
                } else {
                    &mut gates.key[j - layers]
                };
                optim.gate.step(t.data_mut(), grad, &mut self.gate_state[j], glr, true);
            }
            stats.gate_grad_max = Some(max);
            stats.gate_grad_norm = Some(sq.sqrt());
        }
        Ok(stats)
    }
}

/// Dense forward on a throwaway tape, keeping the attention trace.
pub fn dense_trace(params: &ModelParams, tokens: &[usize], batch: usize) -> Result<AttnTrace> {
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        params,
        None,
        &MaskMode::Dense,
        tokens,
        batch,
        ForwardOptions {
            retain_trace: true,
            rng: None,
        },
    )?;
    Ok(out.trace.expect("trace requested"))
}

/// Distillation loss of `gates` against a dense trace, averaged over layers.
///
/// The gate reads the detached layer inputs of the trace, so the graph holds
/// no path back to model weights. Returns the loss and the gate leaves
/// (query, key) registered on `tape`.
pub fn distill_loss(
    tape: &mut Tape,
    gates: &GateParams,
    trace: &AttnTrace,
    kind: DistillObjective,
    k: usize,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let mut total: Option<Var> = None;
    let (mut qs, mut ks) = (Vec::new(), Vec::new());
    for (l, layer) in trace.layers.iter().enumerate() {
        let x = tape.constant(layer.input.clone());
        let q = tape.leaf(gates.query[l].clone(), !gates.frozen);
        let kk = tape.leaf(gates.key[l].clone(), !gates.frozen);
        qs.push(q);
        ks.push(kk);
        let g = gate_scores(tape, x, q, kk, gates.n_heads, gates.d_gate)?;
        let loss = match kind {
            DistillObjective::Kl => kl_distill_loss(tape, &layer.probs, g)?,
            DistillObjective::Bce => {
                let oracle = oracle_mask(&layer.probs, k)?;
                bce_distill_loss(tape, g, &oracle)?
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Config("model has no layers".into()))?;
    let mean = tape.scale(total, 1.0 / trace.layers.len() as f64)?;
    Ok((mean, qs, ks))
}

/// Gate scores of every layer computed from a trace's layer inputs.
pub fn traced_gate_scores(gates: &GateParams, trace: &AttnTrace) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    trace
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let x = tape.constant(layer.input.clone());
            let q = tape.constant(gates.query[l].clone());
            let k = tape.constant(gates.key[l].clone());
            let g = gate_scores(&mut tape, x, q, k, gates.n_heads, gates.d_gate)?;
            Ok(tape.value(g).clone())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub ppl: f64,
    pub topk_mass: Vec<f64>,
    pub entropy_ratio: Vec<f64>,
    pub gate_f1: Option<f64>,
}

/// What [`evaluate`] computes beyond perplexity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalPlan {
    /// Budget for top-k mass and gate F1.
    pub k: usize,
    pub attention_stats: bool,
    pub gate_f1: bool,
}

/// Scores `params` on `batches` under `mode`.
///
/// Attention statistics come from the post-softmax weights of the evaluated
/// mode. Gate F1 compares the gate's top-k with the top-k of the model's
/// dense attention, with the gate reading the dense layer inputs.
pub fn evaluate(
    params: &ModelParams,
    gates: Option<&GateParams>,
    mode: &MaskMode,
    batches: &[Batch],
    plan: EvalPlan,
) -> Result<EvalStats> {
    if batches.is_empty() {
        return Err(Error::Data("no evaluation batches".into()));
    }
    if matches!(mode, MaskMode::StochasticRandom { .. }) {
        return Err(Error::Config(
            "stochastic masks are a training regime, not an evaluation mode".into(),
        ));
    }
    let layers = params.config.n_layers;
    let (mut nll, mut tokens) = (0.0, 0usize);
    let mut mass = vec![0.0; layers];
    let mut ent = vec![0.0; layers];
    let (mut hit, mut sel) = (0usize, 0usize);
    let f1_gates = if plan.gate_f1 { gates } else { None };
    for batch in batches {
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            params,
            gates,
            mode,
            &batch.tokens,
            batch.batch,
            ForwardOptions {
                retain_trace: plan.attention_stats || (f1_gates.is_some() && *mode == MaskMode::Dense),
                rng: None,
            },
        )?;
        let ce = tape.cross_entropy(out.logits, &batch.targets)?;
        nll += tape.value(ce).data()[0] * batch.targets.len() as f64;
        tokens += batch.targets.len();
        if plan.attention_stats {
            let trace = out.trace.as_ref().expect("trace requested");
            for (l, layer) in trace.layers.iter().enumerate() {
                mass[l] += topk_mass(&layer.probs, plan.k)?;
                ent[l] += entropy_ratio(&layer.probs)?;
            }
        }
        if let Some(g) = f1_gates {
            let owned;
            let dense = match (&out.trace, mode) {
                (Some(t), MaskMode::Dense) => t,
                _ => {
                    owned = dense_trace(params, &batch.tokens, batch.batch)?;
                    &owned
                }
            };
            for (layer, scores) in dense.layers.iter().zip(traced_gate_scores(g, dense)?) {
                let (h, s) = f1_counts(&scores, &layer.probs, plan.k)?;
                hit += h;
                sel += s;
            }
        }
    }
    let loss = nll / tokens as f64;
    let nb = batches.len() as f64;
    let (topk_mass, entropy_ratio) = if plan.attention_stats {
        (
            mass.iter().map(|m| m / nb).collect(),
            ent.iter().map(|e| e / nb).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(EvalStats {
        loss,
        ppl: loss.exp(),
        topk_mass,
        entropy_ratio,
        gate_f1: f1_gates.map(|_| hit as f64 / sel as f64),
    })
}
