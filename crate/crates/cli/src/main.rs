use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use d2cache::analysis::{ReportKind, StateKind};
use d2cache_cli::analyze::{cmd_analyze, AnalyzeOptions};
use d2cache_cli::bench::{cmd_bench, BenchOptions, SweepSpec};
use d2cache_cli::run::{cmd_run, resolve_out_dir, OUT_ENV};
use d2cache_cli::selftest::{run_all, Fault, SelftestOptions};
use d2cache_cli::{CliError, PolicyKind, RunConfig, StrategyKind};

#[derive(Parser)]
#[command(name = "d2cache", version, about = "Masked-diffusion decoding with adaptive KV caching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one generation and write its trace and metrics.
    Run(ConfigArgs),
    /// Sweep hyperparameters and policies, writing bench.csv.
    Bench(BenchArgs),
    /// Build plot-ready tables from saved traces.
    Analyze(AnalyzeArgs),
    /// Run the built-in acceptance checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with [model], [decode] and [run] sections.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set decode.sigma=5`.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE")]
    overrides: Vec<String>,
    /// Output directory (beats D2CACHE_OUT and run.out_dir).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    policies: Vec<PolicyKind>,
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<StrategyKind>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Fill the wall_time column (output is then not reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    PcaTrajectory,
    DecodeDistances,
    RolloutDiff,
    DecodeOrder,
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
    Key,
    Value,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Trace files (`*.trace.jsonl`).
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Compare full rollout matrices (rollout_diff).
    #[arg(long)]
    full_matrix: bool,
    /// Position to follow (pca_trajectory).
    #[arg(long)]
    position: Option<usize>,
    #[arg(long, value_enum, default_value = "key")]
    state: StateArg,
    /// Name of the merged decode_order report.
    #[arg(long)]
    run_id: Option<String>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Deliberately break a component to see the checks fail.
    #[arg(long, value_name = "FAULT")]
    inject_fault: Option<Fault>,
}

fn replace_if_given<T>(given: Vec<T>, target: &mut Vec<T>) {
    if !given.is_empty() {
        *target = given;
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
            let out = resolve_out_dir(args.out.as_deref(), &cfg);
            let art = cmd_run(&cfg, &out)?;
            let s = art.trace.summary();
            println!("trace    {}", art.trace_path.display());
            println!("metrics  {}", art.metrics_path.display());
            println!(
                "updates  {} of {} (savings {:.4})",
                s.total_position_updates, s.full_recompute_equivalent, s.savings_ratio
            );
            Ok(())
        }
        Command::Bench(args) => {
            let cfg = RunConfig::load(args.base.config.as_deref(), &args.base.overrides)?;
            let out = resolve_out_dir(args.base.out.as_deref(), &cfg);
            let mut sweep = SweepSpec::from_base(&cfg);
            replace_if_given(args.sigma, &mut sweep.sigmas);
            replace_if_given(args.k, &mut sweep.ks);
            replace_if_given(args.p, &mut sweep.ps);
            replace_if_given(args.policies, &mut sweep.policies);
            replace_if_given(args.strategies, &mut sweep.strategies);
            replace_if_given(args.seeds, &mut sweep.seeds);
            let opts = BenchOptions {
                jobs: args.jobs,
                timing: args.timing,
            };
            let (path, rows) = cmd_bench(&cfg, &sweep, &out, &opts)?;
            let failed = rows.iter().filter(|r| !r.ok()).count();
            println!("bench    {} ({} rows, {failed} failed)", path.display(), rows.len());
            Ok(())
        }
        Command::Analyze(args) => {
            let kind = match args.kind {
                KindArg::PcaTrajectory => ReportKind::PcaTrajectory,
                KindArg::DecodeDistances => ReportKind::DecodeDistances,
                KindArg::RolloutDiff => ReportKind::RolloutDiff,
                KindArg::DecodeOrder => ReportKind::DecodeOrder,
            };
            let out = args.out.unwrap_or_else(|| {
                std::env::var_os(OUT_ENV)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("out"))
            });
            let opts = AnalyzeOptions {
                full_matrix: args.full_matrix,
                position: args.position,
                state: match args.state {
                    StateArg::Key => StateKind::Key,
                    StateArg::Value => StateKind::Value,
                },
                merged_id: args.run_id,
            };
            for (path, report) in cmd_analyze(kind, &args.traces, &out, &opts)? {
                println!("report   {} ({} rows)", path.display(), report.rows.len());
                for (name, v) in &report.summary {
                    println!("  {name} = {v}");
                }
                for note in &report.annotations {
                    println!("  note: {note}");
                }
            }
            Ok(())
        }
        Command::Selftest(args) => {
            let outcomes = run_all(&SelftestOptions {
                fault: args.inject_fault,
            });
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            if failed > 0 {
                return Err(CliError::SelftestFailed(failed));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
