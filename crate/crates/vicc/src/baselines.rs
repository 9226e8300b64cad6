//! Comparison schedulers: conventional snapshot isolation with a central
//! coordinator, and the coordination-free "optimal" scheduler that trades
//! correctness for a throughput upper bound.

use crate::core::{Tid, Ts};
use std::collections::BTreeSet;

/// Central coordinator state, hosted on the master node. Allocates start and
/// commit timestamps from one clock and tracks the ongoing-transaction
/// snapshot. Every begin/end is one round trip to the master; that queue is
/// the serialization point under study.
#[derive(Debug, Default)]
pub struct Coordinator {
    clock: Ts,
    active: BTreeSet<Tid>,
}

impl Coordinator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocate a start timestamp and snapshot the active set, then add the
    /// caller to it.
    pub fn begin(&mut self, tid: Tid) -> (Ts, BTreeSet<Tid>) {
        self.clock += 1;
        let snapshot = self.active.clone();
        self.active.insert(tid);
        (self.clock, snapshot)
    }

    /// Remove the caller from the active set and allocate its commit
    /// timestamp. Unknown tids are a no-op removal.
    pub fn end(&mut self, tid: Tid) -> Ts {
        self.active.remove(&tid);
        self.clock += 1;
        self.clock
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }
}

/// Node-local clock backing the optimal scheduler: arbitrary timestamps, an
/// empty snapshot, zero messages. Explicitly does not ensure correctness.
#[derive(Debug, Default)]
pub struct LocalClock {
    clock: Ts,
}

impl LocalClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin(&mut self) -> (Ts, BTreeSet<Tid>) {
        self.clock += 1;
        (self.clock, BTreeSet::new())
    }

    pub fn end(&mut self) -> Ts {
        self.clock += 1;
        self.clock
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: u32) -> Tid {
        Tid::new(n, 1)
    }

    #[test]
    fn first_txn_sees_empty_snapshot() {
        let mut c = Coordinator::new();
        let (ts, snap) = c.begin(t(1));
        assert_eq!(ts, 1);
        assert!(snap.is_empty());
    }

    #[test]
    fn snapshot_contains_concurrent_txn() {
        let mut c = Coordinator::new();
        c.begin(t(1));
        let (_, snap) = c.begin(t(2));
        assert!(snap.contains(&t(1)));
    }

    #[test]
    fn begin_end_pairs_leave_active_empty_and_clock_monotone() {
        let mut c = Coordinator::new();
        let mut last = 0;
        for n in 1..=100 {
            let (start, _) = c.begin(t(n));
            assert!(start > last);
            let commit = c.end(t(n));
            assert!(commit > start);
            last = commit;
        }
        assert_eq!(c.active_len(), 0);
    }

    #[test]
    fn end_of_unknown_tid_is_noop() {
        let mut c = Coordinator::new();
        c.end(t(9));
        assert_eq!(c.active_len(), 0);
    }

    #[test]
    fn optimal_begin_is_local_and_snapshot_free() {
        let mut l = LocalClock::new();
        let (ts, snap) = l.begin();
        assert_eq!(ts, 1);
        assert!(snap.is_empty());
    }
}
