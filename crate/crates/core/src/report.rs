//! Aggregation of run directories into one CSV per protocol table.
//!
//! Runs of the same protocol are merged when their specs agree on everything
//! except `protocol.seeds`. Output depends only on the set of runs, never on
//! the order in which directories are given.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{Protocol, RunConfig};
use crate::error::{Error, Result};
use crate::experiments::{derive, mean_std, read_summary, sweep_values, FinalValue, Summary};

/// Merged view of all runs of one protocol.
#[derive(Clone, Debug)]
pub struct Merged {
    pub config: RunConfig,
    pub finals: Vec<FinalValue>,
    pub summary: Summary,
}

/// File name of the table emitted for `protocol`.
pub fn table_name(protocol: Protocol) -> &'static str {
    match protocol {
        Protocol::E1Soft => "table1_e1_soft.csv",
        Protocol::E2Hard => "table1b_e2_hard.csv",
        Protocol::E3Contrast => "table2_e3_contrast.csv",
        Protocol::E4Stochastic => "table3_e4_stochastic.csv",
        Protocol::GateOnly => "table4_gate_only.csv",
        Protocol::PosthocDistill => "table5_posthoc_distill.csv",
        Protocol::AbsorptionGradient => "table9_absorption_gradient.csv",
    }
}

fn seedless(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.protocol.seeds.clear();
    c
}

/// `(arm, metric, seed) -> value`.
type Finals = BTreeMap<(String, String, u64), f64>;

/// Groups run directories by protocol and merges their finals.
pub fn merge_runs(dirs: &[PathBuf]) -> Result<BTreeMap<Protocol, Merged>> {
    let mut groups: BTreeMap<Protocol, (RunConfig, Finals)> = BTreeMap::new();
    for dir in dirs {
        let (cfg, file) = read_summary(dir)?;
        let (base, finals) = groups
            .entry(cfg.protocol.name)
            .or_insert_with(|| (seedless(&cfg), BTreeMap::new()));
        if *base != seedless(&cfg) {
            return Err(Error::Aggregation(format!(
                "{} has a {} spec that differs from other runs beyond its seeds",
                dir.display(),
                cfg.protocol.name
            )));
        }
        for f in file.finals {
            let key = (f.arm.clone(), f.metric.clone(), f.seed);
            match finals.get(&key) {
                Some(v) if v.to_bits() != f.value.to_bits() => {
                    return Err(Error::Aggregation(format!(
                        "{}: {} {} seed {} disagrees with another run ({} vs {})",
                        dir.display(),
                        f.arm,
                        f.metric,
                        f.seed,
                        f.value,
                        v
                    )));
                }
                _ => {
                    finals.insert(key, f.value);
                }
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(protocol, (mut config, finals))| {
            let finals: Vec<FinalValue> = finals
                .into_iter()
                .map(|((arm, metric, seed), value)| FinalValue {
                    arm,
                    seed,
                    metric,
                    value,
                })
                .collect();
            let mut seeds: Vec<u64> = finals.iter().map(|f| f.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            config.protocol.seeds = seeds;
            let mut summary = Summary::from_finals(protocol.name(), &finals);
            summary.derived = derive(&config, &summary);
            (
                protocol,
                Merged {
                    config,
                    finals,
                    summary,
                },
            )
        })
        .collect())
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Table {
    out: String,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table {
            out: columns.join(",") + "\n",
        }
    }

    fn row(&mut self, cells: &[String]) {
        writeln!(self.out, "{}", cells.join(",")).expect("string write");
    }
}

/// `[n, mean, std]` cells of one summary row, empty when absent.
fn stat(s: &Summary, arm: &str, metric: &str) -> [String; 3] {
    match s.row(arm, metric) {
        Some(r) => [r.values.len().to_string(), r.mean.to_string(), r.std.to_string()],
        None => Default::default(),
    }
}

fn mean_cells(s: &Summary, arm: &str, metric: &str) -> [String; 2] {
    let [_, m, sd] = stat(s, arm, metric);
    [m, sd]
}

/// Renders the table of one merged protocol.
pub fn render(m: &Merged) -> String {
    let s = &m.summary;
    let d = |key: &str| num(s.derived.get(key).copied());
    match m.config.protocol.name {
        Protocol::E1Soft | Protocol::E2Hard => {
            let mut t = Table::new(&[
                "arm",
                "n_seeds",
                "val_ppl_mean",
                "val_ppl_std",
                "gate_f1_mean",
                "gate_f1_std",
            ]);
            for arm in ["dense", "learned", "random"] {
                if s.row(arm, "val_ppl").is_none() {
                    continue;
                }
                let [n, pm, ps] = stat(s, arm, "val_ppl");
                let [fm, fs] = mean_cells(s, arm, "gate_f1");
                t.row(&[arm.into(), n, pm, ps, fm, fs]);
            }
            t.out
        }
        Protocol::E3Contrast => {
            let mut t = Table::new(&[
                "source",
                "n_seeds",
                "gate_f1_mean",
                "gate_f1_std",
                "deploy_ppl_mean",
                "deploy_ppl_std",
                "source_dense_ppl",
            ]);
            for src in ["dense_source", "soft_source"] {
                let [n, pm, ps] = stat(s, src, "val_ppl");
                let [fm, fs] = mean_cells(s, src, "gate_f1");
                let base = num(s.mean(&format!("{src}@dense"), "val_ppl"));
                t.row(&[src.into(), n, fm, fs, pm, ps, base]);
            }
            t.out
        }
        Protocol::E4Stochastic => {
            let mut t = Table::new(&["arm", "deploy", "n_seeds", "val_ppl_mean", "val_ppl_std"]);
            for (arm, deploy, key) in [
                ("dense", "dense", "dense"),
                ("stochastic", "dense", "stochastic"),
                ("stochastic", "fixed_random", "stochastic@fixed_random"),
            ] {
                if s.row(key, "val_ppl").is_none() {
                    continue;
                }
                let [n, pm, ps] = stat(s, key, "val_ppl");
                t.row(&[arm.into(), deploy.into(), n, pm, ps]);
            }
            t.out
        }
        Protocol::GateOnly => {
            let mut t = Table::new(&[
                "arm",
                "n",
                "val_ppl_mean",
                "val_ppl_std",
                "gate_f1_mean",
                "convergence_step_mean",
                "efficiency",
            ]);
            for arm in ["dense", "oracle", "learned", "random", "fixed_random"] {
                let [n, pm, ps] = stat(s, arm, "val_ppl");
                let f1 = num(s.mean(arm, "gate_f1"));
                let conv = num(s.mean(arm, "convergence_step"));
                let eff = match arm {
                    "learned" => d("efficiency_vs_random_gate"),
                    _ => String::new(),
                };
                t.row(&[arm.into(), n, pm, ps, f1, conv, eff]);
            }
            t.out
        }
        Protocol::PosthocDistill => {
            let mut t = Table::new(&[
                "k",
                "method",
                "n",
                "val_ppl_mean",
                "val_ppl_std",
                "gate_f1_mean",
                "efficiency",
            ]);
            let [n, pm, ps] = stat(s, "dense", "val_ppl");
            t.row(&[String::new(), "dense".into(), n, pm, ps, String::new(), String::new()]);
            for k in m.config.protocol.k_values() {
                for method in ["oracle", "distilled", "fixed_random"] {
                    let arm = format!("{method}@k{k}");
                    let [n, pm, ps] = stat(s, &arm, "val_ppl");
                    let f1 = num(s.mean(&arm, "gate_f1"));
                    let eff = match method {
                        "distilled" => d(&format!("efficiency_k{k}")),
                        _ => String::new(),
                    };
                    t.row(&[k.to_string(), method.into(), n, pm, ps, f1, eff]);
                }
            }
            t.out
        }
        Protocol::AbsorptionGradient => {
            let mut t = Table::new(&[
                "n_unfrozen",
                "learned_ppl_mean",
                "learned_ppl_std",
                "random_ppl_mean",
                "random_ppl_std",
                "gap_mean",
                "gap_std",
                "nogate_ppl_mean",
                "learned_hard_ppl_mean",
                "random_hard_ppl_mean",
                "hard_gap",
            ]);
            for n in sweep_values(&m.config) {
                let [lm, ls] = mean_cells(s, &format!("learned_n{n}"), "val_ppl");
                let [rm, rs] = mean_cells(s, &format!("random_n{n}"), "val_ppl");
                let gaps = paired_gaps(&m.finals, &format!("random_n{n}"), &format!("learned_n{n}"));
                let (gm, gs) = if gaps.is_empty() {
                    (String::new(), String::new())
                } else {
                    let (a, b) = mean_std(&gaps);
                    (a.to_string(), b.to_string())
                };
                let ng = num(s.mean(&format!("nogate_n{n}"), "val_ppl"));
                let lh = num(s.mean(&format!("learned_n{n}@hard_topk"), "val_ppl"));
                let rh = num(s.mean(&format!("random_n{n}@hard_topk"), "val_ppl"));
                t.row(&[
                    n.to_string(),
                    lm,
                    ls,
                    rm,
                    rs,
                    gm,
                    gs,
                    ng,
                    lh,
                    rh,
                    d(&format!("hard_gap_n{n}")),
                ]);
            }
            t.out
        }
    }
}

/// Per-seed `a - b` of `val_ppl`, over seeds both arms have.
pub fn paired_gaps(finals: &[FinalValue], a: &str, b: &str) -> Vec<f64> {
    let of = |arm: &str| -> BTreeMap<u64, f64> {
        finals
            .iter()
            .filter(|f| f.arm == arm && f.metric == "val_ppl")
            .map(|f| (f.seed, f.value))
            .collect()
    };
    let (x, y) = (of(a), of(b));
    x.iter().filter_map(|(s, v)| y.get(s).map(|w| v - w)).collect()
}

/// Writes one table per protocol found in `dirs` into `out`. Returns the
/// written paths in protocol order.
pub fn emit_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if dirs.is_empty() {
        return Err(Error::Aggregation("no run directories given".into()));
    }
    let merged = merge_runs(dirs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (protocol, m) in &merged {
        let path = out.join(table_name(*protocol));
        fs::write(&path, render(m)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
