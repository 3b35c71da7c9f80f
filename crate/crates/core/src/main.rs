use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use absorbkit::config::{DataConfig, Protocol, ProtocolConfig, RunConfig};
use absorbkit::experiments::{self, analyze_concentration, evaluate, Env, EvalPlan, RunOptions};
use absorbkit::gating::MaskMode;
use absorbkit::model::Checkpoint;
use absorbkit::report::emit_report;
use absorbkit::{Error, Result};

const RUNS_DIR_ENV: &str = "ABSORBKIT_RUNS_DIR";

#[derive(Parser)]
#[command(
    name = "absorbkit",
    version,
    about = "Gated sparse attention and routing-absorption experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run e1_soft, e2_hard, e4_stochastic or gate_only.
    Train(RunArgs),
    /// Run posthoc_distill or e3_contrast.
    Distill(RunArgs),
    /// Run absorption_gradient.
    Sweep(RunArgs),
    /// Score a checkpoint under one mask mode.
    Eval(EvalArgs),
    /// Per-layer attention concentration of a checkpoint, as CSV.
    Analyze(AnalyzeArgs),
    /// Aggregate run directories into table CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces protocol.seeds. Repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Run directory. Defaults to $ABSORBKIT_RUNS_DIR/<protocol>-s<seeds>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SourceArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Config whose `data` section selects the corpus. Synthetic by default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eval_batches: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// dense, soft_learned, soft_random, hard_topk, oracle or fixed_random.
    #[arg(long, default_value = "dense")]
    mode: String,
    #[arg(long)]
    k: Option<usize>,
    /// Mask seed of fixed_random.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for summary.json. Defaults to $ABSORBKIT_RUNS_DIR/eval-<mode>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the hard masks of the first validation sequence here.
    #[arg(long)]
    export_masks: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    k: Vec<usize>,
    #[arg(long, default_value = "dense")]
    mode: String,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories containing spec.json and summary.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Defaults to $ABSORBKIT_RUNS_DIR/report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: String,
    mode: MaskMode,
    k: usize,
    val_loss: f64,
    val_ppl: f64,
    gate_f1: Option<f64>,
    topk_mass: Vec<f64>,
    entropy_ratio: Vec<f64>,
}

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_protocol(args: &RunArgs, allowed: &[Protocol], sub: &str) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if !allowed.contains(&cfg.protocol.name) {
        let names: Vec<&str> = allowed.iter().map(|p| p.name()).collect();
        return Err(Error::Config(format!(
            "`{sub}` runs {}; the config names {}",
            names.join(", "),
            cfg.protocol.name
        )));
    }
    if !args.seeds.is_empty() {
        cfg.protocol.seeds = args.seeds.clone();
        cfg.validate()?;
    }
    let out = args.out.clone().unwrap_or_else(|| {
        let seeds: Vec<String> = cfg.protocol.seeds.iter().map(u64::to_string).collect();
        runs_root().join(format!("{}-s{}", cfg.protocol.name, seeds.join("_")))
    });
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        progress: !args.quiet,
    };
    let record = experiments::run(&cfg, &opts)?;
    for (key, value) in &record.summary.derived {
        println!("{key} = {value}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Checkpoint plus the environment its evaluation runs in.
fn load_source(args: &SourceArgs) -> Result<(Checkpoint, Env)> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let data = match &args.config {
        Some(p) => RunConfig::load(p)?.data,
        None => DataConfig::default(),
    };
    let mut cfg = RunConfig::new(ProtocolConfig::new(Protocol::E1Soft, vec![0], 1));
    cfg.model = ckpt.model.config.clone();
    cfg.data = data;
    if let Some(n) = args.eval_batches {
        cfg.data.eval_batches = n;
    }
    cfg.validate()?;
    let env = Env::load(&cfg)?;
    Ok((ckpt, env))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mode = MaskMode::parse(&args.mode, args.k, args.seed)?;
    let (ckpt, env) = load_source(&args.source)?;
    let k = args.k.unwrap_or(16);
    let gates = ckpt.gates.as_ref();
    let plan = EvalPlan {
        k,
        attention_stats: true,
        gate_f1: gates.is_some(),
    };
    let stats = evaluate(&ckpt.model, gates, &mode, &env.valid, plan)?;
    let summary = EvalSummary {
        checkpoint: args.source.ckpt.display().to_string(),
        mode: mode.clone(),
        k,
        val_loss: stats.loss,
        val_ppl: stats.ppl,
        gate_f1: stats.gate_f1,
        topk_mass: stats.topk_mass,
        entropy_ratio: stats.entropy_ratio,
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| runs_root().join(format!("eval-{}", mode.name())));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("summary.json");
    let body = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    if let Some(dir) = &args.export_masks {
        let files = experiments::export_masks(&ckpt.model, gates, &mode, &env.valid[0], dir)?;
        println!("exported {} masks to {}", files.len(), dir.display());
    }
    println!("val_ppl = {}", stats.ppl);
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let k = args.k.first().copied();
    let mode = MaskMode::parse(&args.mode, k, args.seed.unwrap_or(0))?;
    let (ckpt, env) = load_source(&args.source)?;
    let csv = analyze_concentration(&ckpt.model, ckpt.gates.as_ref(), &mode, &env, &args.k)?;
    match &args.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| runs_root().join("report"));
    for path in emit_report(&args.runs, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_protocol(
            a,
            &[
                Protocol::E1Soft,
                Protocol::E2Hard,
                Protocol::E4Stochastic,
                Protocol::GateOnly,
            ],
            "train",
        ),
        Command::Distill(a) => run_protocol(a, &[Protocol::PosthocDistill, Protocol::E3Contrast], "distill"),
        Command::Sweep(a) => run_protocol(a, &[Protocol::AbsorptionGradient], "sweep"),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
