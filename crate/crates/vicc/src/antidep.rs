//! Anti-dependency table: the rw edges (reader --rw--> writer) among ongoing
//! transactions. Each node keeps its own table; an entry is duplicated on the
//! host of the reader and the host of the writer so that lookups stay local.
//!
//! Entries where a transaction is the reader are dropped the moment it
//! terminates. Entries where it is the writer outlive it under CV (the edge
//! is what keeps the writer's versions invisible to the reader); under PostSI
//! and SV the reader's bounds already carry the constraint, so writer-side
//! entries are dropped once the writer's stamp updates have been acknowledged.

use crate::core::Tid;
use std::collections::{BTreeMap, BTreeSet};

/// One recorded rw edge: `reader` read a version that `writer` overwrote.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AntiDepEntry {
    pub reader: Tid,
    pub writer: Tid,
}

/// Per-node anti-dependency table with secondary indexes by each side.
#[derive(Debug, Default)]
pub struct AntiDepTable {
    by_reader: BTreeMap<Tid, BTreeSet<Tid>>,
    by_writer: BTreeMap<Tid, BTreeSet<Tid>>,
    len: usize,
}

impl AntiDepTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record reader --rw--> writer. Idempotent.
    pub fn record(&mut self, reader: Tid, writer: Tid) {
        if self.by_reader.entry(reader).or_default().insert(writer) {
            self.by_writer.entry(writer).or_default().insert(reader);
            self.len += 1;
        }
    }

    pub fn contains(&self, reader: Tid, writer: Tid) -> bool {
        self.by_reader.get(&reader).is_some_and(|ws| ws.contains(&writer))
    }

    /// Writers this reader must never see: every w with reader --rw--> w.
    pub fn writers_invisible_to(&self, reader: Tid) -> Vec<Tid> {
        self.by_reader.get(&reader).map(|ws| ws.iter().copied().collect()).unwrap_or_default()
    }

    /// Readers that must not see this writer: every r with r --rw--> writer.
    pub fn readers_of(&self, writer: Tid) -> Vec<Tid> {
        self.by_writer.get(&writer).map(|rs| rs.iter().copied().collect()).unwrap_or_default()
    }

    /// Remove entries with `t` on the reader side. Returns the writers whose
    /// hosts hold the duplicate.
    pub fn purge_reader(&mut self, t: Tid) -> Vec<Tid> {
        let ws: Vec<Tid> = self.by_reader.remove(&t).map(|s| s.into_iter().collect()).unwrap_or_default();
        for w in &ws {
            if let Some(rs) = self.by_writer.get_mut(w) {
                rs.remove(&t);
                if rs.is_empty() {
                    self.by_writer.remove(w);
                }
            }
            self.len -= 1;
        }
        ws
    }

    /// Remove entries with `t` on the writer side. Returns the readers whose
    /// hosts hold the duplicate.
    pub fn purge_writer(&mut self, t: Tid) -> Vec<Tid> {
        let rs: Vec<Tid> = self.by_writer.remove(&t).map(|s| s.into_iter().collect()).unwrap_or_default();
        for r in &rs {
            if let Some(ws) = self.by_reader.get_mut(r) {
                ws.remove(&t);
                if ws.is_empty() {
                    self.by_reader.remove(r);
                }
            }
            self.len -= 1;
        }
        rs
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> Vec<AntiDepEntry> {
        let mut out = Vec::with_capacity(self.len);
        for (r, ws) in &self.by_reader {
            for w in ws {
                out.push(AntiDepEntry { reader: *r, writer: *w });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: u32) -> Tid {
        Tid::new(n, 1)
    }

    #[test]
    fn record_then_contains_is_directional() {
        let mut tab = AntiDepTable::new();
        tab.record(t(1), t(2));
        assert!(tab.contains(t(1), t(2)));
        assert!(!tab.contains(t(2), t(1)));
    }

    #[test]
    fn record_is_idempotent() {
        let mut tab = AntiDepTable::new();
        tab.record(t(1), t(2));
        tab.record(t(1), t(2));
        assert_eq!(tab.len(), 1);
    }

    #[test]
    fn purge_writer_removes_all_edges_into_it() {
        let mut tab = AntiDepTable::new();
        tab.record(t(1), t(2));
        tab.record(t(3), t(2));
        let readers = tab.purge_writer(t(2));
        assert_eq!(readers, vec![t(1), t(3)]);
        assert!(!tab.contains(t(1), t(2)));
        assert!(tab.is_empty());
    }

    #[test]
    fn purge_unknown_is_noop() {
        let mut tab = AntiDepTable::new();
        assert!(tab.purge_reader(t(9)).is_empty());
        assert!(tab.purge_writer(t(9)).is_empty());
    }

    #[test]
    fn purge_reader_keeps_other_edges() {
        let mut tab = AntiDepTable::new();
        tab.record(t(1), t(2));
        tab.record(t(3), t(2));
        tab.purge_reader(t(1));
        assert!(!tab.contains(t(1), t(2)));
        assert!(tab.contains(t(3), t(2)));
        assert_eq!(tab.len(), 1);
    }

    #[test]
    fn indexes_stay_consistent() {
        let mut tab = AntiDepTable::new();
        tab.record(t(1), t(2));
        tab.record(t(1), t(3));
        tab.record(t(4), t(3));
        assert_eq!(tab.writers_invisible_to(t(1)), vec![t(2), t(3)]);
        assert_eq!(tab.readers_of(t(3)), vec![t(1), t(4)]);
        assert_eq!(tab.entries().len(), 3);
    }
}
