use rand_chacha::ChaCha8Rng;

use super::{ModelParams, ParamKind, LAYERNORM_EPS};
use crate::error::{Error, Result};
use crate::gating::{
    apply_hard, apply_soft, fixed_random_mask, gate_scores, stochastic_mask, topk_mask, GateParams, Mask, MaskMode,
    RankSource,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Keep per-layer attention weights, gate scores and gate inputs.
    pub retain_trace: bool,
    /// Source of fresh masks for [`MaskMode::StochasticRandom`].
    pub rng: Option<&'a mut ChaCha8Rng>,
}

/// Detached per-layer values captured during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Post-norm layer input `[B, n, d]`, the input both Q/K and the gate see.
    pub input: Tensor,
    /// Post-softmax attention `[B, h, n, n]`, before any soft gate.
    pub probs: Tensor,
    /// Gate scores `[B, h, n, n]` when the mode computed them.
    pub gate_scores: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct AttnTrace {
    pub layers: Vec<LayerTrace>,
}

/// Tape handles of the parameter leaves registered by [`forward`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    pub model: Vec<Var>,
    pub gate_query: Vec<Var>,
    pub gate_key: Vec<Var>,
}

pub struct ForwardOutput {
    /// Pre-softmax logits `[B, n, V]`.
    pub logits: Var,
    pub params: ParamVars,
    pub trace: Option<AttnTrace>,
}

/// Runs the transformer on `tokens` (`batch` rows of equal length) under
/// `mode`, recording every op on `tape`.
///
/// Parameters become tape leaves that require a gradient exactly when they
/// are trainable (model) or unfrozen (gate).
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    gates: Option<&GateParams>,
    mode: &MaskMode,
    tokens: &[usize],
    batch: usize,
    opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
        return Err(Error::Shape {
            op: "forward",
            lhs: vec![tokens.len()],
            rhs: vec![batch],
        });
    }
    let n = tokens.len() / batch;
    if n > cfg.seq_len {
        return Err(Error::Config(format!(
            "sequence length {n} exceeds seq_len {}",
            cfg.seq_len
        )));
    }
    let gates = if mode.needs_gates() {
        let g = gates.ok_or_else(|| Error::Config(format!("mode {mode} needs gate parameters")))?;
        if g.n_layers != cfg.n_layers || g.n_heads != cfg.n_heads || g.d_model != cfg.d_model {
            return Err(Error::Config("gate parameters do not match the model config".into()));
        }
        Some(g)
    } else {
        None
    };
    let ForwardOptions { retain_trace, mut rng } = opts;
    let hard = mode.hard_source();
    if let Some((_, RankSource::Stochastic)) = hard {
        if rng.is_none() {
            return Err(Error::Config("stochastic masking needs an rng".into()));
        }
    }

    let model: Vec<Var> = params
        .params
        .iter()
        .map(|p| tape.leaf(p.value.clone(), p.trainable))
        .collect();
    let mut vars = ParamVars {
        model,
        ..Default::default()
    };
    if let Some(g) = gates {
        for l in 0..g.n_layers {
            vars.gate_query.push(tape.leaf(g.query[l].clone(), !g.frozen));
            vars.gate_key.push(tape.leaf(g.key[l].clone(), !g.frozen));
        }
    }
    let p = |kind: ParamKind, layer: Option<usize>| vars.model[params.index_of(kind, layer)];

    let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let causal = Mask::causal(n);
    let positions: Vec<usize> = (0..n).collect();

    let tok = tape.embed(tokens, &[batch, n], p(ParamKind::TokenEmbedding, None))?;
    let pos = tape.embed(&positions, &[n], p(ParamKind::PositionEmbedding, None))?;
    let mut x = tape.add_bcast(tok, pos)?;
    let mut trace = retain_trace.then(AttnTrace::default);

    for l in 0..cfg.n_layers {
        let at = |k| p(k, Some(l));
        let hnorm = tape.layernorm(x, at(ParamKind::Ln1Gain), at(ParamKind::Ln1Bias), LAYERNORM_EPS)?;
        let heads = |tape: &mut Tape, w: Var| -> Result<Var> {
            let y = tape.matmul(hnorm, w, false)?;
            let y = tape.reshape(y, &[batch, n, h, dh])?;
            tape.swap_axes12(y)
        };
        let q = heads(tape, at(ParamKind::Query))?;
        let k = heads(tape, at(ParamKind::Key))?;
        let v = heads(tape, at(ParamKind::Value))?;
        let scores = tape.matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;

        let gate = match gates {
            Some(g) => Some(gate_scores(
                tape,
                hnorm,
                vars.gate_query[l],
                vars.gate_key[l],
                h,
                g.d_gate,
            )?),
            None => None,
        };

        let mask = match hard {
            None => causal.clone(),
            Some((k, RankSource::Gate)) => {
                let g = gate.expect("hard gate mode registers gates");
                topk_mask(tape.value(g), k)?
            }
            Some((k, RankSource::Teacher)) => topk_mask(tape.value(scores), k)?,
            Some((k, RankSource::Random { seed })) => fixed_random_mask(seed, l, h, n, k)?,
            Some((k, RankSource::Stochastic)) => {
                let rng = rng.as_deref_mut().expect("checked above");
                stochastic_mask(batch, h, n, k, rng)?
            }
        };
        let masked = apply_hard(tape, scores, &mask)?;
        let probs = tape.softmax_rows(masked)?;
        let weights = match (mode.is_soft(), gate) {
            (true, Some(g)) => apply_soft(tape, probs, g)?,
            _ => probs,
        };

        if let Some(t) = trace.as_mut() {
            t.layers.push(LayerTrace {
                input: tape.value(hnorm).clone(),
                probs: tape.value(probs).clone(),
                gate_scores: gate.map(|g| tape.value(g).clone()),
            });
        }

        let attn = tape.matmul(weights, v, false)?;
        let attn = tape.swap_axes12(attn)?;
        let attn = tape.reshape(attn, &[batch, n, d])?;
        let attn = tape.matmul(attn, at(ParamKind::Output), false)?;
        x = tape.add(x, attn)?;

        let h2 = tape.layernorm(x, at(ParamKind::Ln2Gain), at(ParamKind::Ln2Bias), LAYERNORM_EPS)?;
        let f = tape.matmul(h2, at(ParamKind::FfIn), false)?;
        let f = tape.add_bcast(f, at(ParamKind::FfInBias))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, at(ParamKind::FfOut), false)?;
        let f = tape.add_bcast(f, at(ParamKind::FfOutBias))?;
        x = tape.add(x, f)?;
    }

    let xf = tape.layernorm(
        x,
        p(ParamKind::FinalGain, None),
        p(ParamKind::FinalBias, None),
        LAYERNORM_EPS,
    )?;
    let logits = tape.matmul(xf, p(ParamKind::TokenEmbedding, None), true)?;
    Ok(ForwardOutput {
        logits,
        params: vars,
        trace,
    })
}
