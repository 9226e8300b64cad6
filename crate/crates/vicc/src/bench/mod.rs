//! Benchmark harness: workload specs, the experiment driver, CSV reports
//! and the conservation audit.

pub mod gen;

use crate::cluster::config::{ClusterConfig, TransportMode};
use crate::cluster::{concurrent, sim, RunArtifacts};
use crate::core::Level;
use std::fmt::Write as _;
use std::time::Duration;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkloadKind {
    SmallBank,
    TpccLite,
    Micro,
}

impl WorkloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::SmallBank => "smallbank",
            WorkloadKind::TpccLite => "tpcc-lite",
            WorkloadKind::Micro => "micro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smallbank" => Some(WorkloadKind::SmallBank),
            "tpcc-lite" | "tpcc_lite" => Some(WorkloadKind::TpccLite),
            "micro" => Some(WorkloadKind::Micro),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub nodes: u32,
    pub workers_per_node: u32,
    pub dist_txn_fraction: f64,
    pub hot_keys_per_node: u32,
    pub hot_access_fraction: f64,
    pub pad_reads: u32,
    /// Customers / warehouses / keys per node, by workload kind.
    pub scale: u32,
    pub txns: u64,
    pub seed: u64,
    pub tpcc_neworder_pct: u32,
}

impl WorkloadSpec {
    /// Desk-scale defaults used by tests and as CLI fallbacks.
    pub fn example() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Micro,
            nodes: 4,
            workers_per_node: 4,
            dist_txn_fraction: 0.2,
            hot_keys_per_node: 20,
            hot_access_fraction: 0.0,
            pad_reads: 0,
            scale: 500,
            txns: 2000,
            seed: 1,
            tpcc_neworder_pct: 50,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.dist_txn_fraction) {
            return Err("dist fraction must be within [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.hot_access_fraction) {
            return Err("hot fraction must be within [0, 1]".into());
        }
        if self.tpcc_neworder_pct > 100 {
            return Err("neworder percentage must be within [0, 100]".into());
        }
        if self.nodes == 0 || self.workers_per_node == 0 || self.scale == 0 {
            return Err("nodes, workers and scale must be positive".into());
        }
        Ok(())
    }
}

/// One row of the results table.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub scheduler: Level,
    pub workload: WorkloadKind,
    pub nodes: u32,
    pub dist_frac: f64,
    pub hot_frac: f64,
    pub throughput: f64,
    pub abort_rate: f64,
    pub msgs_per_txn: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "scheduler,workload,nodes,dist_frac,hot_frac,throughput,abort_rate,msgs_per_txn,seed";

pub fn emit_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{:.6},{:.4},{}",
            r.scheduler.as_str(),
            r.workload.as_str(),
            r.nodes,
            r.dist_frac,
            r.hot_frac,
            r.throughput,
            r.abort_rate,
            r.msgs_per_txn,
            r.seed
        );
    }
    out
}

/// Build the workload, run it on the configured transport, and summarize.
/// In sim mode the whole run is deterministic; throughput is committed
/// transactions per million simulated ticks. In concurrent mode throughput
/// is committed transactions per second of wall clock.
pub fn run_experiment(
    spec: &WorkloadSpec,
    scheduler: Level,
    cfg: &ClusterConfig,
    duration: Option<Duration>,
) -> (RunReport, RunArtifacts) {
    spec.validate().expect("invalid workload spec");
    let mut cfg = *cfg;
    cfg.nodes = spec.nodes;
    cfg.workers_per_node = spec.workers_per_node;
    cfg.seed = spec.seed;
    let w = gen::build_workload(spec);
    let artifacts = match cfg.transport {
        TransportMode::Sim => sim::run_sim(&cfg, scheduler, &w.data, w.programs),
        TransportMode::Concurrent => concurrent::run_concurrent(&cfg, scheduler, &w.data, w.programs, duration),
    };
    let throughput = artifacts.committed() as f64 * 1e6 / artifacts.ticks.max(1) as f64;
    let report = RunReport {
        scheduler,
        workload: spec.kind,
        nodes: spec.nodes,
        dist_frac: spec.dist_txn_fraction,
        hot_frac: spec.hot_access_fraction,
        throughput,
        abort_rate: artifacts.abort_rate(),
        msgs_per_txn: artifacts.msgs_per_txn(),
        seed: spec.seed,
    };
    (report, artifacts)
}

/// End-state audit: the committed effects recorded by the driver must land
/// exactly in the final values. Holds for every scheduler except the
/// correctness-free optimal baseline.
pub fn conservation_check(initial_total: i64, artifacts: &RunArtifacts) -> Result<(), String> {
    let final_total: i64 = artifacts.final_values.values().sum();
    let expected = initial_total + artifacts.committed_delta;
    if final_total == expected {
        Ok(())
    } else {
        Err(format!(
            "conservation violated: initial {initial_total} + committed deltas {} = {expected}, found {final_total}",
            artifacts.committed_delta
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_only_for_empty_reports() {
        let csv = emit_csv(&[]);
        assert_eq!(csv, format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_one_row_per_report() {
        let r = RunReport {
            scheduler: Level::PostSi,
            workload: WorkloadKind::Micro,
            nodes: 4,
            dist_frac: 0.2,
            hot_frac: 0.0,
            throughput: 123.0,
            abort_rate: 0.01,
            msgs_per_txn: 3.5,
            seed: 7,
        };
        let csv = emit_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("postsi,micro,4,"));
    }

    #[test]
    fn spec_validation_rejects_bad_fractions() {
        let mut s = WorkloadSpec::example();
        s.dist_txn_fraction = 1.5;
        assert!(s.validate().is_err());
    }
}
