//! Append-only history sink shared by all nodes of a run. The logical time
//! stamped on each record is a global observation counter, so the file is a
//! total order and byte-identical across deterministic replays.

use crate::core::Tid;
use crate::mvstore::Key;
use crate::oracle::{EventKind, HistoryEvent};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

#[derive(Debug, Default)]
pub struct HistorySink {
    records: Mutex<Vec<HistoryEvent>>,
    clock: AtomicU64,
}

impl HistorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(&self, kind: EventKind, tid: Tid, key: Option<Key>, seq: u32, node: u32) {
        let time = self.clock.fetch_add(1, Ordering::Relaxed) + 1;
        self.records.lock().unwrap().push(HistoryEvent { kind, tid, key, seq, node, time });
    }

    pub fn take(&self) -> Vec<HistoryEvent> {
        std::mem::take(&mut self.records.lock().unwrap())
    }
}
