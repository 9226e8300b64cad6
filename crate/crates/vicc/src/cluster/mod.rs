//! Shared-nothing runtime: nodes, partitioning, the message protocol, a
//! deterministic discrete-event simulator and a threaded runtime for real
//! throughput measurements.

pub mod config;
pub mod concurrent;
pub mod history;
pub mod message;
pub mod node;
pub mod program;
pub mod sim;
pub mod topology;

use crate::core::{Stamp, Tid};
use crate::mvstore::Key;
use crate::oracle::HistoryEvent;
use message::MetricsSnapshot;
use std::collections::BTreeMap;

/// Everything a finished run exposes: the observation log the oracle
/// consumes, the committed stamps for direct inequality checks, counters,
/// the conservation ledger and the final committed state.
#[derive(Debug)]
pub struct RunArtifacts {
    pub history: Vec<HistoryEvent>,
    pub stamps: BTreeMap<Tid, Stamp>,
    pub metrics: MetricsSnapshot,
    pub committed_delta: i64,
    pub final_values: BTreeMap<Key, i64>,
    /// Simulated ticks (sim mode) or elapsed microseconds (concurrent mode).
    pub ticks: u64,
    /// Anti-dependency entries left across all nodes once the run drained;
    /// the tables only hold ongoing pairs, so this is zero at quiescence.
    pub leftover_antidep_entries: usize,
}

impl RunArtifacts {
    pub fn committed(&self) -> u64 {
        self.metrics.committed
    }

    pub fn aborted(&self) -> u64 {
        self.metrics.aborted_total()
    }

    pub fn abort_rate(&self) -> f64 {
        if self.metrics.attempts == 0 {
            0.0
        } else {
            self.metrics.aborted_total() as f64 / self.metrics.attempts as f64
        }
    }

    pub fn msgs_per_txn(&self) -> f64 {
        if self.metrics.attempts == 0 {
            0.0
        } else {
            self.metrics.cross_total() as f64 / self.metrics.attempts as f64
        }
    }
}
