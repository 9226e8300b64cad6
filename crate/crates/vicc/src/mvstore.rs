//! Per-node multi-version storage.
//!
//! Each data node owns one `Partition`: a map from keys to `Item`s. An item
//! holds its version chain (oldest first, so a version's chain index is its
//! stable identity), a transaction-level write lock, and the writer list that
//! closes the commit-window race: a version whose creator is still on the
//! writer list has been installed but not published, and every reader treats
//! it as invisible.
//!
//! Visitor lists are kept per version and cleaned lazily: the next accessor
//! of an item removes visitors that are known to have terminated, folding the
//! start time (or order) of committed readers into the version's SID. The
//! read path never inspects the write lock, so reads are non-blocking.

use crate::core::{Tid, Ts, TS_INF, LOADER_TID};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

pub type Key = u64;
pub type Value = Vec<u8>;

/// One committed (or in-flight) value of an item.
#[derive(Debug, Clone)]
pub struct Version {
    pub value: Value,
    pub creator: Tid,
    /// Commit time (PostSI) or order (SV) of the creator; `TS_INF` until the
    /// creator publishes. Set exactly once.
    pub cid: Ts,
    /// Max start time / order of committed readers, folded in lazily.
    pub sid: Ts,
    /// Ongoing (or lazily uncollected) readers of this version.
    pub visitors: BTreeSet<Tid>,
}

impl Version {
    fn initial(value: Value) -> Self {
        Version { value, creator: LOADER_TID, cid: 0, sid: 0, visitors: BTreeSet::new() }
    }
}

/// How the visibility of committed versions is judged on the read path.
pub enum ReadRule<'a> {
    /// CV: skip versions created by writers the reader already depends on
    /// (reader --rw--> writer recorded in the anti-dependency table).
    Cv { invisible: &'a BTreeSet<Tid> },
    /// PostSI / SV: visible iff cid <= the reader's upper bound.
    UpperBound(Ts),
    /// Baselines: visible iff cid <= start and the creator was not active
    /// when the reader began.
    Snapshot { start: Ts, active: &'a BTreeSet<Tid> },
}

/// A successful read.
#[derive(Debug, Clone)]
pub struct ReadHit {
    pub value: Value,
    pub seq: u32,
    pub cid: Ts,
}

/// Outcome of a visibility walk. `hit` is `None` when every version was
/// excluded. `inflight_skipped` lists creators from the writer list whose
/// unpublished versions the walk stepped over; the reader must record the
/// matching invisibility constraint.
#[derive(Debug, Default)]
pub struct ReadOutcome {
    pub hit: Option<ReadHit>,
    pub inflight_skipped: Vec<Tid>,
}

/// What became of a visitor, as far as the collecting node knows.
#[derive(Debug, Clone, Copy)]
pub enum VisitorFate {
    Ongoing,
    /// Terminated with a commit stamp; the value is its SID contribution
    /// (start time under PostSI, order under SV).
    Committed(Ts),
    /// Aborted, or committed with no SID contribution.
    Gone,
}

/// Constraints gathered from an item a transaction is about to overwrite.
#[derive(Debug, Default)]
pub struct WriteGather {
    /// cid of the newest committed version (the one being overwritten).
    pub overwritten_cid: Ts,
    /// Max SID over the gathered versions.
    pub max_sid: Ts,
    /// Visitors not known to have terminated; the committing writer must
    /// negotiate with each of them.
    pub ongoing_visitors: BTreeSet<Tid>,
}

/// Why a write-lock validation failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteConflict {
    /// The version the transaction read is no longer the newest.
    StaleRead { read_seq: u32, newest_seq: u32 },
    /// The newest version was created by a writer the transaction must not
    /// see (reader --rw--> creator exists).
    InvisibleNewest { creator: Tid },
    /// Write lock held by another transaction.
    Locked { holder: Tid },
    /// First-committer-wins under snapshot isolation: someone committed a
    /// newer version after the transaction's start timestamp.
    SnapshotStale { newest_cid: Ts },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockNotHeld;

#[derive(Debug, Default)]
pub struct Item {
    chain: Vec<Version>,
    wlock: Option<Tid>,
    writers: BTreeSet<Tid>,
}

impl Item {
    pub fn preloaded(value: Value) -> Self {
        Item { chain: vec![Version::initial(value)], wlock: None, writers: BTreeSet::new() }
    }

    pub fn chain(&self) -> &[Version] {
        &self.chain
    }

    pub fn lock_holder(&self) -> Option<Tid> {
        self.wlock
    }

    pub fn writer_list(&self) -> &BTreeSet<Tid> {
        &self.writers
    }

    fn newest_committed(&self) -> Option<(u32, &Version)> {
        self.chain
            .iter()
            .enumerate()
            .rev()
            .find(|(_, v)| !self.writers.contains(&v.creator))
            .map(|(i, v)| (i as u32, v))
    }

    /// Remove terminated visitors, folding committed readers' stamps into the
    /// version SIDs. Invoked by the next accessor of the item.
    pub fn lazy_collect(&mut self, resolve: &mut dyn FnMut(Tid) -> VisitorFate) {
        for v in &mut self.chain {
            if v.visitors.is_empty() {
                continue;
            }
            let mut keep = BTreeSet::new();
            for t in std::mem::take(&mut v.visitors) {
                match resolve(t) {
                    VisitorFate::Ongoing => {
                        keep.insert(t);
                    }
                    VisitorFate::Committed(s) => v.sid = v.sid.max(s),
                    VisitorFate::Gone => {}
                }
            }
            v.visitors = keep;
        }
    }

    /// Walk the chain newest-first and return the latest visible version,
    /// registering `visitor` in its visitor list atomically with the read.
    /// Baseline schedulers read without joining visitor lists. Never
    /// consults the write lock.
    pub fn read_visible(&mut self, visitor: Option<Tid>, rule: &ReadRule<'_>) -> ReadOutcome {
        let mut out = ReadOutcome::default();
        let mut chosen: Option<usize> = None;
        for (i, v) in self.chain.iter().enumerate().rev() {
            if self.writers.contains(&v.creator) {
                out.inflight_skipped.push(v.creator);
                continue;
            }
            let visible = match rule {
                ReadRule::Cv { invisible } => !invisible.contains(&v.creator),
                ReadRule::UpperBound(u) => v.cid <= *u,
                ReadRule::Snapshot { start, active } => v.cid <= *start && !active.contains(&v.creator),
            };
            if visible {
                chosen = Some(i);
                break;
            }
        }
        if let Some(i) = chosen {
            let v = &mut self.chain[i];
            if let Some(t) = visitor {
                v.visitors.insert(t);
            }
            out.hit = Some(ReadHit { value: v.value.clone(), seq: i as u32, cid: v.cid });
        }
        out
    }

    /// Take the write lock. Locks are only taken in the commit phase and are
    /// held until publish or rollback.
    pub fn try_lock(&mut self, tid: Tid) -> Result<(), WriteConflict> {
        match self.wlock {
            None => {
                self.wlock = Some(tid);
                Ok(())
            }
            Some(h) if h == tid => Ok(()),
            Some(h) => Err(WriteConflict::Locked { holder: h }),
        }
    }

    pub fn unlock(&mut self, tid: Tid) {
        if self.wlock == Some(tid) {
            self.wlock = None;
        }
    }

    /// Post-lock validation: (i) if the transaction read this item, the
    /// version it read must still be the newest; (ii) the chain must contain
    /// no version from a writer the transaction already regards invisible —
    /// appending after such a version would force that writer visible by
    /// write order. The newest version is the usual witness; a deeper one
    /// only arises on blind writes.
    pub fn validate(&self, read_seq: Option<u32>, invisible: &BTreeSet<Tid>) -> Result<(), WriteConflict> {
        let Some((newest_seq, _)) = self.newest_committed() else {
            return Ok(());
        };
        if let Some(r) = read_seq {
            if r != newest_seq {
                return Err(WriteConflict::StaleRead { read_seq: r, newest_seq });
            }
        }
        if !invisible.is_empty() {
            for v in &self.chain {
                if !self.writers.contains(&v.creator) && invisible.contains(&v.creator) {
                    return Err(WriteConflict::InvisibleNewest { creator: v.creator });
                }
            }
        }
        Ok(())
    }

    /// Snapshot-isolation validation for the baseline schedulers
    /// (first-updater-wins): the version the transaction read must still be
    /// the newest, and the newest version must be visible in its snapshot.
    pub fn validate_baseline(
        &self,
        read_seq: Option<u32>,
        start: Ts,
        active: &BTreeSet<Tid>,
    ) -> Result<(), WriteConflict> {
        let Some((newest_seq, newest)) = self.newest_committed() else {
            return Ok(());
        };
        if let Some(r) = read_seq {
            if r != newest_seq {
                return Err(WriteConflict::StaleRead { read_seq: r, newest_seq });
            }
        }
        if newest.cid > start || active.contains(&newest.creator) {
            return Err(WriteConflict::SnapshotStale { newest_cid: newest.cid });
        }
        Ok(())
    }

    /// Gather negotiation inputs from the versions about to be overwritten.
    /// `union_visitors` widens the visitor sweep to every committed version
    /// (needed by CV, whose readers are only constrained through rw edges).
    pub fn gather(&self, union_visitors: bool, exclude: Tid) -> WriteGather {
        let mut g = WriteGather::default();
        if let Some((_, newest)) = self.newest_committed() {
            g.overwritten_cid = newest.cid;
            g.max_sid = newest.sid;
            for t in &newest.visitors {
                if *t != exclude {
                    g.ongoing_visitors.insert(*t);
                }
            }
        }
        if union_visitors {
            for v in &self.chain {
                if self.writers.contains(&v.creator) {
                    continue;
                }
                g.max_sid = g.max_sid.max(v.sid);
                for t in &v.visitors {
                    if *t != exclude {
                        g.ongoing_visitors.insert(*t);
                    }
                }
            }
        }
        g
    }

    /// Append a new version with unset cid and add the creator to the writer
    /// list. Requires the write lock.
    pub fn install(&mut self, tid: Tid, value: Value) -> Result<(), LockNotHeld> {
        if self.wlock != Some(tid) {
            return Err(LockNotHeld);
        }
        self.chain.push(Version {
            value,
            creator: tid,
            cid: TS_INF,
            sid: 0,
            visitors: BTreeSet::new(),
        });
        self.writers.insert(tid);
        Ok(())
    }

    /// Publish the installed version: set its cid, drop the writer-list entry
    /// and release the lock. Returns the version's chain position. SID updates
    /// for read versions are deferred to lazy collection.
    pub fn publish(&mut self, tid: Tid, cid: Ts) -> u32 {
        let idx = self
            .chain
            .iter()
            .rposition(|v| v.creator == tid && v.cid == TS_INF)
            .expect("publish without installed version");
        self.chain[idx].cid = cid;
        self.writers.remove(&tid);
        self.unlock(tid);
        idx as u32
    }

    /// Undo an installed-but-unpublished version. Committed versions are
    /// immutable; only the in-flight tail can be removed.
    pub fn rollback(&mut self, tid: Tid) {
        if self.writers.remove(&tid) {
            match self.chain.last() {
                Some(v) if v.creator == tid && v.cid == TS_INF => {
                    self.chain.pop();
                }
                _ => panic!("rollback: in-flight version is not the chain tail"),
            }
        }
        self.unlock(tid);
    }
}

/// One node's share of the database. Keys are predeclared at load time;
/// transactions neither insert nor delete items.
#[derive(Debug, Default)]
pub struct Partition {
    items: BTreeMap<Key, Mutex<Item>>,
}

impl Partition {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&mut self, key: Key, value: Value) {
        self.items.insert(key, Mutex::new(Item::preloaded(value)));
    }

    pub fn item(&self, key: Key) -> &Mutex<Item> {
        self.items.get(&key).expect("unknown key: items are predeclared at load time")
    }

    pub fn contains(&self, key: Key) -> bool {
        self.items.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Newest committed value per key, for end-state audits.
    pub fn committed_values(&self) -> BTreeMap<Key, Value> {
        let mut out = BTreeMap::new();
        for (k, item) in &self.items {
            let item = item.lock().unwrap();
            if let Some((_, v)) = item.newest_committed() {
                out.insert(*k, v.value.clone());
            }
        }
        out
    }

    /// Total visitor-list entries, for quiescence checks.
    pub fn visitor_count(&self) -> usize {
        self.items
            .values()
            .map(|i| i.lock().unwrap().chain.iter().map(|v| v.visitors.len()).sum::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Bound;

    fn t(n: u32) -> Tid {
        Tid::new(n, 1)
    }

    fn val(x: i64) -> Value {
        x.to_le_bytes().to_vec()
    }

    /// Item with a committed chain of (creator, cid) pairs, oldest first.
    fn item_with_chain(versions: &[(Tid, Ts)]) -> Item {
        let mut item = Item::default();
        for (i, (creator, cid)) in versions.iter().enumerate() {
            item.chain.push(Version {
                value: val(i as i64),
                creator: *creator,
                cid: *cid,
                sid: 0,
                visitors: BTreeSet::new(),
            });
        }
        item
    }

    #[test]
    fn postsi_read_takes_newest_under_upper_bound() {
        // chain = [v1(cid=2), v2(cid=5)]
        let mut item = item_with_chain(&[(t(1), 2), (t(2), 5)]);
        let out = item.read_visible(Some(t(9)), &ReadRule::UpperBound(TS_INF));
        let hit = out.hit.unwrap();
        assert_eq!(hit.cid, 5);
        assert_eq!(hit.seq, 1);
        // Rule (3) fold happens at the scheduler layer; the store reports cid.
        let b = Bound::initial().tighten_lower(hit.cid);
        assert_eq!(b.lower, 5);
    }

    #[test]
    fn postsi_read_skips_versions_above_upper_bound() {
        let mut item = item_with_chain(&[(t(1), 2), (t(2), 5)]);
        let out = item.read_visible(Some(t(9)), &ReadRule::UpperBound(4));
        let hit = out.hit.unwrap();
        assert_eq!(hit.cid, 2);
        assert_eq!(hit.seq, 0);
    }

    #[test]
    fn fresh_txn_reads_initial_version_without_bound_change() {
        let mut item = Item::preloaded(val(7));
        let out = item.read_visible(Some(t(9)), &ReadRule::UpperBound(TS_INF));
        let hit = out.hit.unwrap();
        assert_eq!(hit.cid, 0);
        let b = Bound::initial().tighten_lower(hit.cid);
        assert_eq!(b, Bound::initial());
    }

    #[test]
    fn cv_read_steps_down_past_invisible_creator() {
        // t1 --rw--> t2 recorded: t1 must skip t2's version.
        let mut item = item_with_chain(&[(t(0), 0), (t(2), 3)]);
        let invisible: BTreeSet<Tid> = [t(2)].into_iter().collect();
        let out = item.read_visible(Some(t(1)), &ReadRule::Cv { invisible: &invisible });
        let hit = out.hit.unwrap();
        assert_eq!(hit.seq, 0);
        assert!(item.chain[0].visitors.contains(&t(1)));
    }

    #[test]
    fn read_skips_inflight_version_and_reports_its_writer() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.try_lock(t(5)).unwrap();
        item.install(t(5), val(99)).unwrap();
        let out = item.read_visible(Some(t(9)), &ReadRule::UpperBound(TS_INF));
        assert_eq!(out.inflight_skipped, vec![t(5)]);
        assert_eq!(out.hit.unwrap().seq, 0);
    }

    #[test]
    fn read_never_consults_write_lock() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.try_lock(t(5)).unwrap();
        // Lock held, nothing installed: the committed version stays readable.
        let out = item.read_visible(Some(t(9)), &ReadRule::UpperBound(TS_INF));
        assert_eq!(out.hit.unwrap().seq, 0);
    }

    #[test]
    fn lock_conflict_and_reentrancy() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        assert!(item.try_lock(t(5)).is_ok());
        assert!(item.try_lock(t(5)).is_ok());
        assert_eq!(item.try_lock(t(6)), Err(WriteConflict::Locked { holder: t(5) }));
    }

    #[test]
    fn validate_accepts_newest_read() {
        let item = item_with_chain(&[(t(1), 2)]);
        assert!(item.validate(Some(0), &BTreeSet::new()).is_ok());
    }

    #[test]
    fn validate_rejects_stale_read() {
        // txn read v0; someone committed v1 first.
        let item = item_with_chain(&[(t(1), 2), (t(2), 5)]);
        assert_eq!(
            item.validate(Some(0), &BTreeSet::new()),
            Err(WriteConflict::StaleRead { read_seq: 0, newest_seq: 1 })
        );
    }

    #[test]
    fn validate_rejects_invisible_newest_creator() {
        let item = item_with_chain(&[(t(0), 0), (t(2), 3)]);
        let invisible: BTreeSet<Tid> = [t(2)].into_iter().collect();
        assert_eq!(
            item.validate(None, &invisible),
            Err(WriteConflict::InvisibleNewest { creator: t(2) })
        );
    }

    #[test]
    fn install_requires_lock_and_appends() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        assert_eq!(item.install(t(5), val(9)), Err(LockNotHeld));
        item.try_lock(t(5)).unwrap();
        item.install(t(5), val(9)).unwrap();
        assert_eq!(item.chain().len(), 2);
        assert!(item.writer_list().contains(&t(5)));
    }

    #[test]
    fn publish_sets_cid_and_clears_writer_entry() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.try_lock(t(5)).unwrap();
        item.install(t(5), val(9)).unwrap();
        let seq = item.publish(t(5), 6);
        assert_eq!(seq, 1);
        assert_eq!(item.chain()[1].cid, 6);
        assert!(item.writer_list().is_empty());
        assert_eq!(item.lock_holder(), None);
    }

    #[test]
    fn rollback_pops_installed_version() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.try_lock(t(5)).unwrap();
        item.install(t(5), val(9)).unwrap();
        item.rollback(t(5));
        assert_eq!(item.chain().len(), 1);
        assert!(item.writer_list().is_empty());
        assert_eq!(item.lock_holder(), None);
    }

    #[test]
    fn lazy_collect_folds_committed_reader_stamp_into_sid() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.chain[0].sid = 2;
        item.chain[0].visitors.insert(t(7));
        item.lazy_collect(&mut |tid| {
            assert_eq!(tid, t(7));
            VisitorFate::Committed(5)
        });
        assert!(item.chain[0].visitors.is_empty());
        assert_eq!(item.chain[0].sid, 5);
    }

    #[test]
    fn lazy_collect_keeps_active_readers() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.chain[0].visitors.insert(t(7));
        item.lazy_collect(&mut |_| VisitorFate::Ongoing);
        assert!(item.chain[0].visitors.contains(&t(7)));
    }

    #[test]
    fn lazy_collect_drops_aborted_readers_without_sid_change() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.chain[0].sid = 4;
        item.chain[0].visitors.insert(t(7));
        item.lazy_collect(&mut |_| VisitorFate::Gone);
        assert!(item.chain[0].visitors.is_empty());
        assert_eq!(item.chain[0].sid, 4);
    }

    #[test]
    fn sid_folds_take_max() {
        // reader with smaller stamp leaves sid alone
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.chain[0].sid = 4;
        item.chain[0].visitors.insert(t(7));
        item.lazy_collect(&mut |_| VisitorFate::Committed(1));
        assert_eq!(item.chain[0].sid, 4);
    }

    #[test]
    fn gather_newest_only_vs_union() {
        let mut item = item_with_chain(&[(t(1), 2), (t(2), 5)]);
        item.chain[0].visitors.insert(t(8));
        item.chain[1].visitors.insert(t(9));
        let newest = item.gather(false, t(0));
        assert_eq!(newest.overwritten_cid, 5);
        assert_eq!(newest.ongoing_visitors, [t(9)].into_iter().collect());
        let union = item.gather(true, t(0));
        assert_eq!(union.ongoing_visitors, [t(8), t(9)].into_iter().collect());
    }

    #[test]
    fn gather_excludes_self() {
        let mut item = item_with_chain(&[(t(1), 2)]);
        item.chain[0].visitors.insert(t(5));
        let g = item.gather(false, t(5));
        assert!(g.ongoing_visitors.is_empty());
    }
}
