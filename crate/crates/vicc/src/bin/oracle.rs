//! History validation CLI: checks a recorded history log against an
//! isolation level and prints a witness (violating pair or cycle) on
//! failure, or a satisfying assignment on success. Exit code 0 = pass,
//! 1 = fail.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use vicc::oracle::{
    check_cv, check_postsi, check_sv, extract_dependencies, parse_history, CvVerdict, PostSiVerdict,
    SvVerdict,
};

#[derive(Parser)]
#[command(name = "oracle", about = "Isolation oracle for recorded execution histories", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a history file against an isolation level.
    Check(CheckArgs),
}

#[derive(clap::Args)]
struct CheckArgs {
    /// Isolation level to check: cv | postsi | sv
    #[arg(long)]
    level: String,
    /// History log file (`kind tid key seq node time` per line).
    #[arg(long)]
    history: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Check(args) => check(args),
    }
}

fn check(args: CheckArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.history) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.history.display());
            return ExitCode::FAILURE;
        }
    };
    let events = match parse_history(&text) {
        Ok(ev) => ev,
        Err(e) => {
            eprintln!("malformed history: {e}");
            return ExitCode::FAILURE;
        }
    };
    let deps = match extract_dependencies(&events) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("malformed history: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "{} committed transactions, {} wr / {} ww / {} rw dependencies",
        deps.committed.len(),
        deps.wr.len(),
        deps.ww.len(),
        deps.rw.len()
    );

    match args.level.as_str() {
        "cv" => match check_cv(&deps) {
            CvVerdict::Pass => {
                println!("cv: PASS (every pair admits an atomic visibility assignment)");
                ExitCode::SUCCESS
            }
            CvVerdict::Fail { pair, violation } => {
                println!("cv: FAIL ({} vs {}): {violation:?}", pair.0, pair.1);
                ExitCode::FAILURE
            }
        },
        "postsi" => match check_postsi(&deps) {
            PostSiVerdict::Pass { stamps } => {
                println!("postsi: PASS, satisfying assignment:");
                for (t, (s, c)) in stamps {
                    println!("  {t}: start {s}, commit {c}");
                }
                ExitCode::SUCCESS
            }
            PostSiVerdict::Fail { cycle } => {
                println!("postsi: FAIL, infeasible visibility cycle:");
                for step in cycle {
                    let arrow = if step.invisibility { "-/->" } else { "->" };
                    println!("  {} {arrow} {}", step.from, step.to);
                }
                ExitCode::FAILURE
            }
            PostSiVerdict::FailCv { pair, violation } => {
                println!("postsi: FAIL (not even CV: {} vs {}: {violation:?})", pair.0, pair.1);
                ExitCode::FAILURE
            }
        },
        "sv" => match check_sv(&deps) {
            SvVerdict::Pass { order } => {
                println!(
                    "sv: PASS, serialization order: {}",
                    order.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
                );
                ExitCode::SUCCESS
            }
            SvVerdict::Fail { cycle } => {
                println!(
                    "sv: FAIL, dependency cycle: {}",
                    cycle.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" -> ")
                );
                ExitCode::FAILURE
            }
            SvVerdict::FailCv { pair, violation } => {
                println!("sv: FAIL (not even CV: {} vs {}: {violation:?})", pair.0, pair.1);
                ExitCode::FAILURE
            }
        },
        other => {
            eprintln!("unknown level `{other}` (expected cv | postsi | sv)");
            ExitCode::FAILURE
        }
    }
}
