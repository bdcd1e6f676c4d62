//! Command-line front end: standalone solver calls, training runs,
//! noise-sweep benchmarks, and report consolidation.
//!
//! Exit codes: 0 success, 2 configuration or parse error, 3 I/O error,
//! 4 numeric error (infeasibility, divergence).

mod config;
mod matrix_io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::ExperimentConfig;
use potalign::bench::{run_noise_bench, BenchSpec, LossKind};
use potalign::lp::exact_pot_lp;
use potalign::metric::CostMatrix;
use potalign::solver::{partial_ot, plan_diagnostics, SolverConfig, TransportPlan};
use potalign::synth::generate_world;
use potalign::train::{
    metrics_csv, metrics_json, save_checkpoint, train_with_observer, MetricsRecord,
};
use potalign::TOOL_VERSION;

#[derive(Parser)]
#[command(name = "potalign", version, about = "Partial optimal transport alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one partial transport instance from text matrix files.
    Solve(SolveArgs),
    /// Run a training experiment from a JSON config.
    Train(TrainArgs),
    /// Factorial noise-tolerance benchmark (rho x loss x seed).
    BenchNoise(BenchArgs),
    /// Consolidate metrics JSON files into one summary.
    Report(ReportArgs),
    /// Generate a synthetic triplet dataset and export it as a container.
    ExportDataset(ExportArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Cost matrix file (whitespace-separated rows).
    cost: PathBuf,
    /// Row marginal vector file.
    p: PathBuf,
    /// Column marginal vector file.
    q: PathBuf,
    /// Entropy regularization coefficient.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Mass to transport; defaults to 0.9 * min(sum p, sum q).
    #[arg(long)]
    mass: Option<f64>,
    /// Use the exact LP oracle instead of the entropic solver (n,m <= 6).
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 10_000)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// Output path for the plan CSV.
    #[arg(long, default_value = "plan.csv")]
    out_plan: PathBuf,
    /// Output path for the diagnostics JSON.
    #[arg(long, default_value = "diagnostics.json")]
    out_diagnostics: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON path.
    #[arg(long)]
    config: PathBuf,
    /// Also export the generated dataset container to this path.
    #[arg(long)]
    export_dataset: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated misalignment rates.
    #[arg(long = "rho-list", default_value = "0.0,0.3")]
    rho_list: String,
    /// Comma-separated losses; each of: mpot, contrastive.
    #[arg(long, default_value = "mpot,contrastive")]
    losses: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Parallel worker cap for independent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output CSV path; defaults to <output dir>/<prefix>-bench.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics JSON files produced by `train`.
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "summary.json")]
    out: PathBuf,
    /// Plot-ready long-format CSV.
    #[arg(long = "out-csv")]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "dataset.pota")]
    out: PathBuf,
}

enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn report(&self) -> (u8, &str) {
        match self {
            CliError::Config(m) => (2, m),
            CliError::Io(m) => (3, m),
            CliError::Numeric(m) => (4, m),
        }
    }
}

fn numeric(e: potalign::Error) -> CliError {
    match e {
        potalign::Error::InvalidConfig(_) | potalign::Error::BatchTooSmall(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Numeric(other.to_string()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Train(args) => cmd_train(args),
        Command::BenchNoise(args) => cmd_bench_noise(args),
        Command::Report(args) => cmd_report(args),
        Command::ExportDataset(args) => cmd_export_dataset(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = e.report();
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

// ── solve ────────────────────────────────────────────────────────────

fn cmd_solve(args: SolveArgs) -> Result<(), CliError> {
    let cost_values = matrix_io::read_matrix(&args.cost).map_err(classify_read_error)?;
    let p = matrix_io::read_vector(&args.p).map_err(classify_read_error)?;
    let q = matrix_io::read_vector(&args.q).map_err(classify_read_error)?;
    let cost = CostMatrix::new(cost_values).map_err(|e| CliError::Config(e.to_string()))?;

    let max_mass = p.iter().sum::<f64>().min(q.iter().sum::<f64>());
    let mass = args.mass.unwrap_or(0.9 * max_mass);
    let cfg = SolverConfig {
        epsilon: args.epsilon,
        mass,
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let plan: TransportPlan = if args.exact {
        exact_pot_lp(&cost, &p, &q, mass).map_err(numeric)?
    } else {
        partial_ot(&cost, &p, &q, &cfg).map_err(numeric)?
    };
    let diag = plan_diagnostics(&plan.plan, &p, &q, mass);

    write_file(&args.out_plan, &matrix_io::matrix_csv(&plan.plan))?;
    let doc = json!({
        "version": TOOL_VERSION,
        "config": {
            "cost": args.cost.display().to_string(),
            "p": args.p.display().to_string(),
            "q": args.q.display().to_string(),
            "epsilon": cfg.epsilon,
            "mass": mass,
            "max_iterations": cfg.max_iterations,
            "tolerance": cfg.tolerance,
            "exact": args.exact,
        },
        "converged": plan.converged,
        "iterations_used": plan.iterations_used,
        "achieved_mass": plan.achieved_mass,
        "objective": plan.objective(&cost),
        "diagnostics": diag,
    });
    write_file(
        &args.out_diagnostics,
        &serde_json::to_string_pretty(&doc).expect("json"),
    )?;
    println!(
        "solved {}x{} instance: mass {:.6}, objective {:.6}, converged {}",
        plan.plan.rows(),
        plan.plan.cols(),
        plan.achieved_mass,
        plan.objective(&cost),
        plan.converged
    );
    Ok(())
}

fn classify_read_error(msg: String) -> CliError {
    if msg.contains("io error") {
        CliError::Io(msg)
    } else {
        CliError::Config(msg)
    }
}

// ── train ────────────────────────────────────────────────────────────

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(CliError::Config)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let resolved = cfg.resolved_json();
    println!("{resolved}");

    let world = generate_world(&cfg.world).map_err(numeric)?;
    if let Some(path) = &args.export_dataset {
        potalign::synth::save_dataset(&world, path)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }

    let dir = cfg.output_dir();
    let prefix = cfg.prefix().to_string();
    let train_cfg = cfg.train_config();
    let every = train_cfg.checkpoint_every;
    let mut checkpoint_error: Option<CliError> = None;
    let outcome = {
        let mut observer = |epoch: usize, params: &potalign::train::ModelParams, _: &MetricsRecord| {
            if every > 0 && (epoch + 1) % every == 0 && checkpoint_error.is_none() {
                let path = dir.join(format!("{prefix}-epoch-{:04}.pota", epoch + 1));
                if let Err(e) = save_checkpoint(params, &path) {
                    checkpoint_error = Some(CliError::Io(e.to_string()));
                }
            }
        };
        train_with_observer(&world, &cfg.model, &train_cfg, &mut observer).map_err(numeric)?
    };
    if let Some(e) = checkpoint_error {
        return Err(e);
    }

    let csv_path = dir.join(format!("{prefix}-metrics.csv"));
    let json_path = dir.join(format!("{prefix}-metrics.json"));
    let ckpt_path = dir.join(format!("{prefix}-checkpoint.pota"));
    write_file(&csv_path, &metrics_csv(&outcome.metrics, &resolved))?;
    write_file(&json_path, &metrics_json(&outcome.metrics, &resolved))?;
    save_checkpoint(&outcome.params, &ckpt_path).map_err(|e| CliError::Io(e.to_string()))?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "trained {} epochs: total {:.4}, top1_s {:.3}, gap {:.4}",
            outcome.metrics.len(),
            last.total,
            last.top1_s,
            last.gap
        );
    }
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

// ── bench-noise ──────────────────────────────────────────────────────

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    let vals: Result<Vec<T>, _> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>())
        .collect();
    vals.map_err(|_| CliError::Config(format!("cannot parse {what} list '{s}'")))
}

fn cmd_bench_noise(args: BenchArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let rhos: Vec<f64> = parse_list(&args.rho_list, "rho")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    let losses: Vec<LossKind> = args
        .losses
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(LossKind::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let spec = BenchSpec {
        rhos,
        losses,
        seeds,
        jobs: args.jobs,
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let table = run_noise_bench(&cfg.world, &cfg.model, &cfg.train_config(), &spec)
        .map_err(numeric)?;
    let out = args
        .out
        .unwrap_or_else(|| cfg.output_dir().join(format!("{}-bench.csv", cfg.prefix())));
    write_file(&out, &table.to_csv(&cfg.resolved_json()))?;
    for a in &table.aggregates {
        println!(
            "rho {:<4} {:<12} top1_s {:.3} +- {:.3}  mispair {:.4} (full {:.4})",
            a.rho,
            a.loss.label(),
            a.top1_s_mean,
            a.top1_s_sd,
            a.mispair_mass_partial_mean,
            a.mispair_mass_full_mean
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    if args.inputs.is_empty() {
        return Err(CliError::Config("no metrics files given".into()));
    }
    let mut runs = Vec::new();
    let mut format_version: Option<u64> = None;
    for path in &args.inputs {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: not metrics JSON: {e}", path.display())))?;
        let fv = doc
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| {
                CliError::Config(format!("{}: missing format_version", path.display()))
            })?;
        if let Some(expect) = format_version {
            if fv != expect {
                return Err(CliError::Config(format!(
                    "{}: format_version {fv} differs from {expect}",
                    path.display()
                )));
            }
        } else {
            format_version = Some(fv);
        }
        runs.push((path.display().to_string(), doc));
    }

    // Aggregate the final records' numeric fields over runs.
    let mut sums: std::collections::BTreeMap<String, f64> = Default::default();
    let mut count = 0usize;
    for (_, doc) in &runs {
        if let Some(rec) = doc.get("final").and_then(|v| v.as_object()) {
            count += 1;
            for (k, v) in rec {
                if let Some(x) = v.as_f64() {
                    *sums.entry(k.clone()).or_insert(0.0) += x;
                }
            }
        }
    }
    let aggregates: serde_json::Map<String, serde_json::Value> = sums
        .into_iter()
        .map(|(k, v)| (k, json!(v / count.max(1) as f64)))
        .collect();

    let summary = json!({
        "version": TOOL_VERSION,
        "format_version": format_version,
        "runs": runs
            .iter()
            .map(|(source, doc)| {
                json!({
                    "source": source,
                    "config": doc.get("config"),
                    "final": doc.get("final"),
                    "epochs": doc.get("records").and_then(|r| r.as_array()).map(|r| r.len()),
                })
            })
            .collect::<Vec<_>>(),
        "aggregate_final_mean": aggregates,
    });
    write_file(&args.out, &serde_json::to_string_pretty(&summary).expect("json"))?;

    if let Some(csv_path) = &args.out_csv {
        let mut csv = String::from("run,epoch,total,kl_vs,kl_vt,rec,top1_s,top5_s,top1_t,top5_t,gap,mispair_mass\n");
        for (source, doc) in &runs {
            if let Some(records) = doc.get("records").and_then(|r| r.as_array()) {
                for rec in records {
                    let f = |k: &str| {
                        rec.get(k)
                            .and_then(|v| v.as_f64())
                            .map(|x| format!("{x}"))
                            .unwrap_or_default()
                    };
                    csv.push_str(&format!(
                        "{source},{},{},{},{},{},{},{},{},{},{},{}\n",
                        f("epoch"),
                        f("total"),
                        f("kl_vs"),
                        f("kl_vt"),
                        f("rec"),
                        f("top1_s"),
                        f("top5_s"),
                        f("top1_t"),
                        f("top5_t"),
                        f("gap"),
                        f("mispair_mass")
                    ));
                }
            }
        }
        write_file(csv_path, &csv)?;
        println!("wrote {}", csv_path.display());
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ── export-dataset ───────────────────────────────────────────────────

fn cmd_export_dataset(args: ExportArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let world = generate_world(&cfg.world).map_err(numeric)?;
    potalign::synth::save_dataset(&world, &args.out).map_err(|e| CliError::Io(e.to_string()))?;
    println!(
        "wrote {} ({} triplets)",
        args.out.display(),
        world.triplets.len()
    );
    Ok(())
}
