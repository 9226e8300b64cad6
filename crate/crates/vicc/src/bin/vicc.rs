//! Benchmark driver CLI.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;
use vicc::bench::{conservation_check, emit_csv, gen, run_experiment, WorkloadKind, WorkloadSpec};
use vicc::cluster::config::{ClusterConfig, TransportMode};
use vicc::core::Level;
use vicc::oracle::format_history;

#[derive(Parser)]
#[command(name = "vicc", about = "Visibility-based concurrency control benchmark harness", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one benchmark configuration and emit a CSV row plus a history log.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Scheduler: cv | postsi | sv | central | optimal
    #[arg(long)]
    scheduler: String,
    /// Workload: smallbank | tpcc-lite | micro
    #[arg(long)]
    workload: String,
    #[arg(long, default_value_t = 4)]
    nodes: u32,
    #[arg(long, default_value_t = 8)]
    workers: u32,
    /// Fraction of transactions touching 2-3 random nodes.
    #[arg(long, default_value_t = 0.2)]
    dist_frac: f64,
    /// Fraction of transactions hitting the per-node hot set.
    #[arg(long, default_value_t = 0.0)]
    hot_frac: f64,
    /// Hot keys per node.
    #[arg(long, default_value_t = 20)]
    hot_keys: u32,
    /// Extra random reads appended to every transaction.
    #[arg(long, default_value_t = 0)]
    pad_reads: u32,
    /// Customers / warehouses / keys per node.
    #[arg(long, default_value_t = 1000)]
    scale: u32,
    /// Total transactions to issue.
    #[arg(long, default_value_t = 10_000)]
    txns: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Transport: sim | concurrent
    #[arg(long, default_value = "sim")]
    mode: String,
    /// NewOrder percentage of the TPC-C-lite mix.
    #[arg(long, default_value_t = 50)]
    neworder_pct: u32,
    /// Run the concurrent mode for this many milliseconds, cycling the
    /// generated programs, instead of draining them once.
    #[arg(long)]
    duration_ms: Option<u64>,
    /// Cluster settings file (key=value; see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Append the CSV row here (header written if the file is new).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the history log here.
    #[arg(long)]
    history: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Bench(args) => bench(args),
    }
}

fn bench(args: BenchArgs) -> ExitCode {
    let Some(scheduler) = Level::parse(&args.scheduler) else {
        eprintln!("unknown scheduler `{}`", args.scheduler);
        return ExitCode::FAILURE;
    };
    let Some(kind) = WorkloadKind::parse(&args.workload) else {
        eprintln!("unknown workload `{}`", args.workload);
        return ExitCode::FAILURE;
    };
    let mut cfg = match &args.config {
        Some(path) => match ClusterConfig::from_kv_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::FAILURE;
            }
        },
        None => ClusterConfig::default(),
    };
    cfg.transport = match args.mode.as_str() {
        "sim" => TransportMode::Sim,
        "concurrent" => TransportMode::Concurrent,
        other => {
            eprintln!("unknown mode `{other}`");
            return ExitCode::FAILURE;
        }
    };
    let spec = WorkloadSpec {
        kind,
        nodes: args.nodes,
        workers_per_node: args.workers,
        dist_txn_fraction: args.dist_frac,
        hot_keys_per_node: args.hot_keys,
        hot_access_fraction: args.hot_frac,
        pad_reads: args.pad_reads,
        scale: args.scale,
        txns: args.txns,
        seed: args.seed,
        tpcc_neworder_pct: args.neworder_pct,
    };
    if let Err(e) = spec.validate() {
        eprintln!("{e}");
        return ExitCode::FAILURE;
    }

    let duration = args.duration_ms.map(Duration::from_millis);
    let initial_total = gen::build_workload(&spec).initial_total;
    let (report, artifacts) = run_experiment(&spec, scheduler, &cfg, duration);

    println!(
        "{} on {}: committed {} / attempted {} (abort rate {:.4}), {:.2} msgs/txn, throughput {:.1}",
        scheduler.as_str(),
        kind.as_str(),
        artifacts.committed(),
        artifacts.metrics.attempts,
        report.abort_rate,
        report.msgs_per_txn,
        report.throughput,
    );
    if kind == WorkloadKind::SmallBank && scheduler != Level::Optimal {
        match conservation_check(initial_total, &artifacts) {
            Ok(()) => println!("conservation audit: ok"),
            Err(e) => {
                eprintln!("conservation audit: {e}");
                return ExitCode::FAILURE;
            }
        }
    }

    if let Some(path) = &args.history {
        if let Err(e) = std::fs::write(path, format_history(&artifacts.history)) {
            eprintln!("cannot write history: {e}");
            return ExitCode::FAILURE;
        }
        println!("history log: {}", path.display());
    }
    if let Some(path) = &args.out {
        let csv = emit_csv(std::slice::from_ref(&report));
        let existing = std::fs::read_to_string(path).unwrap_or_default();
        let payload: String = if existing.is_empty() {
            csv
        } else {
            csv.lines().skip(1).map(|l| format!("{l}\n")).collect()
        };
        let mut merged = existing;
        merged.push_str(&payload);
        if let Err(e) = std::fs::write(path, merged) {
            eprintln!("cannot write report: {e}");
            return ExitCode::FAILURE;
        }
        println!("report row: {}", path.display());
    }
    ExitCode::SUCCESS
}
