//! Training loop, evaluation and the experiment protocols.

mod optim;
mod protocols;
mod record;
mod train;

pub use optim::{AdamState, AdamW, Schedule};
pub use protocols::{convergence_step, run, run_with_env, RunOptions};
pub(crate) use protocols::{derive, sweep_values};
pub use record::{
    mean_std, read_summary, FinalValue, RunRecord, Summary, SummaryFile, SummaryRow, CHECKPOINT_DIR, METRICS_CSV,
    METRICS_JSONL, SPEC_FILE, SUMMARY_FILE,
};
pub use train::{
    dense_trace, distill_loss, evaluate, traced_gate_scores, Arm, Env, EvalPlan, EvalStats, Objective, Optim, StepStats,
};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::gating::{encode_mask_file, fixed_random_mask, oracle_mask, topk_mask, GateParams, Mask, MaskMode};
use crate::model::{forward, ForwardOptions, ModelParams};
use crate::tensor::Tape;

/// Per-layer attention concentration of a model under `mode`, as CSV with
/// columns `layer,k,topk_mass,entropy_ratio`.
pub fn analyze_concentration(
    params: &ModelParams,
    gates: Option<&GateParams>,
    mode: &MaskMode,
    env: &Env,
    ks: &[usize],
) -> Result<String> {
    let mut out = String::from("layer,k,topk_mass,entropy_ratio\n");
    for &k in ks {
        let plan = EvalPlan {
            k,
            attention_stats: true,
            gate_f1: false,
        };
        let stats = evaluate(params, gates, mode, &env.valid, plan)?;
        for (l, (m, e)) in stats.topk_mass.iter().zip(&stats.entropy_ratio).enumerate() {
            writeln!(out, "{l},{k},{m},{e}").expect("string write");
        }
    }
    Ok(out)
}

/// Writes the hard masks the model applies to the first sequence of `batch`
/// as `mask_l{layer}_h{head}.abmk` files in `dir`.
///
/// Oracle masks are recovered as the top-k of the masked attention weights,
/// which keep exactly the selected keys.
pub fn export_masks(
    params: &ModelParams,
    gates: Option<&GateParams>,
    mode: &MaskMode,
    batch: &Batch,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let Some((k, _)) = mode.hard_source() else {
        return Err(Error::Config(format!("mode {} applies no hard mask", mode.name())));
    };
    if matches!(mode, MaskMode::StochasticRandom { .. }) {
        return Err(Error::Config("stochastic masks are not replayable".into()));
    }
    let cfg = &params.config;
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        params,
        gates,
        mode,
        &batch.tokens,
        batch.batch,
        ForwardOptions {
            retain_trace: true,
            rng: None,
        },
    )?;
    let trace = out.trace.expect("trace requested");
    let seed = match mode {
        MaskMode::FixedRandom { seed, .. } => *seed,
        _ => 0,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = cfg.seq_len;
    let mut written = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        let mask = match mode {
            MaskMode::HardTopK { .. } => {
                topk_mask(layer.gate_scores.as_ref().expect("hard mode traces gate scores"), k)?
            }
            MaskMode::Oracle { .. } => oracle_mask(&layer.probs, k)?,
            _ => fixed_random_mask(seed, l, cfg.n_heads, n, k)?,
        };
        for h in 0..cfg.n_heads {
            let cells = &mask.keep()[h * n * n..(h + 1) * n * n];
            let head = Mask::new(vec![n, n], cells.to_vec(), k)?;
            let path = dir.join(format!("mask_l{l}_h{h}.abmk"));
            fs::write(&path, encode_mask_file(&head, seed)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
