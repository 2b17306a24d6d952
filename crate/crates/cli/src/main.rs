//! `cbf-safelayer`: train, evaluate, benchmark and self-check the safety layer.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cbf_safelayer::bench::{emit_report, run_bench, BenchSpec, Method};
use cbf_safelayer::check;
use cbf_safelayer::config::{load_config, RunConfig};
use cbf_safelayer::learner::{evaluate, train_with, write_metrics_csv, Checkpoint, TrainOptions};
use cbf_safelayer::trace::export_traces;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cbf-safelayer",
    version,
    about = "Composite CBF safety layer for soft actor-critic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a filtered SAC agent.
    Train(TrainArgs),
    /// Roll out a trained policy through the filter.
    Eval(EvalArgs),
    /// Time the closed-form filter against the QP baseline.
    Bench(BenchArgs),
    /// Run the oracle and gradient suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-step traces and a trajectory plot.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: u64,
    /// Write per-step traces and a trajectory plot.
    #[arg(long)]
    traces: bool,
    /// Master seed for start states [default: training seed + 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: <checkpoint dir>/eval].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated constraint counts.
    #[arg(long, value_delimiter = ',', default_value = "3,10,30")]
    constraints: Vec<usize>,
    /// Timed instances per cell.
    #[arg(long, default_value_t = 10_000)]
    reps: usize,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of closed_form, qp_baseline.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "closed_form,qp_baseline")]
    methods: Vec<Method>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method {s:?} (expected closed_form or qp_baseline)"))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

type Outcome = Result<(), Failure>;

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_manifest(target: &Path, seed: u64, config: serde_json::Value, artifacts: &[PathBuf]) -> Outcome {
    manifest::write(target, seed, config, artifacts)
        .map_err(|e| runtime(format!("cannot write manifest {}: {e}", target.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

fn train(args: TrainArgs) -> Outcome {
    let mut cfg: RunConfig = load_config(&args.config).map_err(usage)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;

    let started = Instant::now();
    let total = cfg.sac.episodes;
    let mut observer = |m: &cbf_safelayer::learner::EpisodeMetrics| {
        if (m.episode + 1).is_multiple_of(50) || m.episode + 1 == total {
            eprintln!(
                "episode {:>5}/{total}  return {:>9.2}  steps {:>3}  min h {:.4}  ({:.0}s)",
                m.episode + 1,
                m.episode_return,
                m.steps,
                m.min_composite_h_episode,
                started.elapsed().as_secs_f64()
            );
        }
    };
    let opts = TrainOptions {
        record_traces: args.traces,
    };
    let out = train_with(&cfg.env, &cfg.sac, &cfg.filter, cfg.seed, &opts, &mut observer).map_err(runtime)?;

    let mut artifacts = Vec::new();
    let ckpt_path = dir.join("checkpoint.json");
    out.checkpoint.save(&ckpt_path).map_err(runtime)?;
    artifacts.push(ckpt_path);
    let metrics_path = dir.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    write_metrics_csv(&out.metrics, BufWriter::new(file)).map_err(runtime)?;
    artifacts.push(metrics_path);
    if args.traces {
        let (csv, svg) = export_traces(&dir, &cfg.env, &out.traces).map_err(runtime)?;
        artifacts.extend([csv, svg]);
    }
    write_manifest(&dir.join(manifest::MANIFEST_FILE), cfg.seed, to_json(&cfg), &artifacts)?;

    let min_h = out
        .metrics
        .iter()
        .map(|m| m.min_composite_h_episode)
        .fold(f64::INFINITY, f64::min);
    let min_hi = out
        .metrics
        .iter()
        .map(|m| m.min_hi_episode)
        .fold(f64::INFINITY, f64::min);
    let window = out.metrics.len().min(100);
    let mean = |ms: &[cbf_safelayer::learner::EpisodeMetrics]| {
        ms.iter().map(|m| m.episode_return).sum::<f64>() / ms.len().max(1) as f64
    };
    println!(
        "trained {} episodes ({} steps, {} updates) in {:.1}s",
        out.metrics.len(),
        out.total_steps,
        out.updates,
        started.elapsed().as_secs_f64()
    );
    println!("min composite h {min_h:.6}, min h_i {min_hi:.6}");
    println!(
        "mean return: first {window} episodes {:.2}, last {window} episodes {:.2}",
        mean(&out.metrics[..window]),
        mean(&out.metrics[out.metrics.len() - window..])
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(usage)?;
    let policy = ckpt.policy_net().map_err(usage)?;
    let seed = args.seed.unwrap_or_else(|| ckpt.seed.wrapping_add(1));
    let dir = args
        .out
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    create_dir(&dir)?;
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cfg = &ckpt.config;
    let episodes = usize::try_from(args.episodes).map_err(usage)?;
    let report = evaluate(&policy, &cfg.env, &cfg.filter, episodes, seed, args.traces, threads).map_err(runtime)?;

    let mut artifacts = Vec::new();
    let summary_path = dir.join("eval.csv");
    let mut text = String::from("episode,steps,reached_goal,return,min_hi,min_composite_h,unsafe_steps\n");
    for e in &report.episodes {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.episode,
            e.steps,
            u8::from(e.reached_goal),
            e.episode_return,
            e.min_hi,
            e.min_composite_h,
            e.unsafe_steps
        ));
    }
    std::fs::write(&summary_path, text).map_err(|e| runtime(format!("{}: {e}", summary_path.display())))?;
    artifacts.push(summary_path);
    if args.traces {
        let (csv, svg) = export_traces(&dir, &cfg.env, &report.traces).map_err(runtime)?;
        artifacts.extend([csv, svg]);
    }
    let config = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "episodes": episodes,
        "run": to_json(cfg),
    });
    write_manifest(&dir.join(manifest::MANIFEST_FILE), seed, config, &artifacts)?;

    println!(
        "{} episodes: success rate {:.1}%, unsafe steps {}, min h_i {:.6}",
        report.episodes.len(),
        100.0 * report.success_rate(),
        report.unsafe_steps(),
        report.min_hi()
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

/// Mean cost of one `Instant::now()` / `elapsed()` pair, included in every timed call.
fn timer_overhead() -> f64 {
    let n = 100_000;
    let start = Instant::now();
    let mut acc = std::time::Duration::ZERO;
    for _ in 0..n {
        let t = Instant::now();
        acc += std::hint::black_box(t.elapsed());
    }
    std::hint::black_box(acc);
    start.elapsed().as_secs_f64() / n as f64
}

fn bench(args: BenchArgs) -> Outcome {
    let spec = BenchSpec {
        constraint_counts: args.constraints,
        repetitions: args.reps,
        methods: args.methods,
        seed: args.seed,
        ..BenchSpec::default()
    };
    spec.validate().map_err(usage)?;
    let rows = run_bench(&spec).map_err(runtime)?;
    let report = emit_report(&rows).map_err(runtime)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&args.out, &report.csv).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    print!("{}", report.summary);
    println!(
        "timer overhead per call: {:.1} ns (included in every ATTS)",
        timer_overhead() * 1e9
    );

    let manifest_path = args.out.with_extension("manifest.json");
    let config = serde_json::json!({
        "constraint_counts": spec.constraint_counts,
        "repetitions": spec.repetitions,
        "methods": spec.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "kappa": spec.kappa,
        "alpha_gain": spec.alpha.gain(),
        "solver_tolerance": spec.solver.tolerance,
        "solver_max_iterations": spec.solver.max_iterations,
    });
    write_manifest(&manifest_path, spec.seed, config, std::slice::from_ref(&args.out))?;

    let invalid: Vec<String> = rows
        .iter()
        .filter(|r| !r.valid)
        .map(|r| format!("{} I={}", r.method.name(), r.constraint_count))
        .collect();
    if invalid.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!(
            "correctness gate or failure budget not met for {}",
            invalid.join(", ")
        )))
    }
}

fn run_checks(args: CheckArgs) -> Outcome {
    let outcomes = check::run_all(args.seed).map_err(runtime)?;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    match outcomes.iter().find(|o| !o.passed) {
        None => Ok(()),
        Some(o) => Err(runtime(format!("check failed: {}", o.name))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Check(a) => run_checks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
