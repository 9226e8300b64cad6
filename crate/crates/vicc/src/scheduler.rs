//! The per-transaction scheduling rules for CV, PostSI and SV as pure
//! functions over transaction state. PostSI and SV layer their timestamp
//! negotiation on top of the CV machinery; CV itself keeps no bounds at all.
//!
//! The cluster runtime drives these rules; everything here is local
//! arithmetic so the negotiation steps can be unit-tested against hand-worked
//! values.

use crate::core::{AbortReason, Bound, BoundCheck, Level, Phase, Stamp, Tid, Ts, TS_INF};
use crate::mvstore::{Key, Value};
use std::collections::{BTreeMap, BTreeSet};

/// Host-side state of one transaction attempt.
#[derive(Debug)]
pub struct TxnCtx {
    pub tid: Tid,
    pub level: Level,
    pub phase: Phase,
    /// PostSI start-time bounds [s_lower, s_upper].
    pub start: Bound,
    /// PostSI commit-time lower bound (upper end fixed at +inf).
    pub commit_lower: Ts,
    /// SV order bounds [o_lower, o_upper].
    pub order: Bound,
    /// Private write set; invisible to everyone until commit.
    pub write_set: BTreeMap<Key, Value>,
    /// Version each key was read at, for commit-time validation.
    pub read_versions: BTreeMap<Key, u32>,
    /// In-flight writers whose unpublished versions this transaction skipped;
    /// each imposes an invisibility constraint resolved at commit entry.
    pub pending_writers: BTreeSet<Tid>,
    /// Highest cid this attempt has observed, for abort retries.
    pub max_cid_seen: Ts,
    /// The finalized stamp, set at decision time. Visible to remote bound
    /// messages, which switch from tightening this transaction to reporting
    /// its stamp once it is decided.
    pub decided: Option<Stamp>,
    /// Start/order lower bounds of readers this transaction must commit
    /// above, sampled during the commit rounds (Rule 4(a) inputs).
    pub incoming_lowers: Vec<Ts>,
    /// Readers that registered against this transaction through writer-list
    /// resolution; they receive round-2 caps along with the gathered ones.
    pub extra_cap_targets: BTreeSet<Tid>,
    /// Baseline state: snapshot-SI start timestamp and active-set snapshot.
    pub snapshot_start: Ts,
    pub snapshot_active: BTreeSet<Tid>,
}

impl TxnCtx {
    /// Fresh context per the per-level initial bounds: PostSI starts at
    /// s in [0, +inf), c_lower = 0; SV starts at o in [0, +inf); CV keeps
    /// no live bounds.
    pub fn begin(tid: Tid, level: Level) -> Self {
        TxnCtx {
            tid,
            level,
            phase: Phase::Active,
            start: Bound::initial(),
            commit_lower: 0,
            order: Bound::initial(),
            write_set: BTreeMap::new(),
            read_versions: BTreeMap::new(),
            pending_writers: BTreeSet::new(),
            max_cid_seen: 0,
            decided: None,
            incoming_lowers: Vec::new(),
            extra_cap_targets: BTreeSet::new(),
            snapshot_start: 0,
            snapshot_active: BTreeSet::new(),
        }
    }

    /// Retry after a bound-violation abort: the new attempt pins its initial
    /// upper bound so reads skip the versions that caused the previous abort.
    /// Pinning at +inf is identical to a normal begin.
    pub fn begin_pinned(tid: Tid, level: Level, pinned_upper: Ts) -> Self {
        let mut ctx = Self::begin(tid, level);
        match level {
            Level::PostSi => ctx.start = Bound::pinned(pinned_upper),
            Level::Sv => ctx.order = Bound::pinned(pinned_upper),
            _ => {}
        }
        ctx
    }

    /// The live upper bound used for CID visibility on reads.
    pub fn read_upper(&self) -> Ts {
        match self.level {
            Level::PostSi => self.start.upper,
            Level::Sv => self.order.upper,
            _ => TS_INF,
        }
    }

    /// Rule (3): reading or overwriting a version with the given cid makes
    /// its creator visible, raising the lower bounds.
    pub fn fold_access(&mut self, cid: Ts) {
        self.max_cid_seen = self.max_cid_seen.max(cid);
        match self.level {
            Level::PostSi => {
                self.start = self.start.tighten_lower(cid);
                self.commit_lower = self.commit_lower.max(cid);
            }
            Level::Sv => {
                self.order = self.order.tighten_lower(cid);
            }
            _ => {}
        }
    }

    /// Lower-bound merge returned by a remote node that updated the
    /// delegated copy while processing reads there.
    pub fn merge_remote_lower(&mut self, lower: Ts) {
        match self.level {
            Level::PostSi => self.start = self.start.tighten_lower(lower),
            Level::Sv => self.order = self.order.tighten_lower(lower),
            _ => {}
        }
    }

    /// Cap from a committing writer this transaction must not see
    /// (Rule (4)(b), reader side): s_upper <= c - 1, o_upper <= o - 1.
    pub fn apply_upper_cap(&mut self, cap: Ts) {
        match self.level {
            Level::PostSi => self.start = self.start.tighten_upper(cap),
            Level::Sv => self.order = self.order.tighten_upper(cap),
            _ => {}
        }
    }

    /// Exclusive form of the upper cap: the transaction must end up strictly
    /// below `below`. A writer at order 0 admits no reader at all, which a
    /// clamped subtraction cannot express; the bound is emptied instead.
    pub fn apply_upper_below(&mut self, below: Ts) {
        match below.checked_sub(1) {
            Some(cap) => self.apply_upper_cap(cap),
            None => match self.level {
                Level::PostSi => {
                    self.start = self.start.tighten_lower(1).tighten_upper(0);
                }
                Level::Sv => {
                    self.order = self.order.tighten_lower(1).tighten_upper(0);
                }
                _ => {}
            },
        }
    }

    /// Raise from a committed transaction whose versions this one overwrote
    /// missing it (Rule (4)(b), writer side): c_lower / o_lower pushed up.
    pub fn apply_lower_raise(&mut self, v: Ts) {
        match self.level {
            Level::PostSi => self.commit_lower = self.commit_lower.max(v),
            Level::Sv => self.order = self.order.tighten_lower(v),
            _ => {}
        }
    }

    /// Rule (5): abort as soon as a bound interval empties.
    pub fn bounds_ok(&self) -> bool {
        match self.level {
            Level::PostSi => self.start.check() == BoundCheck::Ok,
            Level::Sv => self.order.check() == BoundCheck::Ok,
            _ => true,
        }
    }

    /// The upper bound to pin a retry at, valid after a bound violation.
    pub fn pin_for_retry(&self) -> Ts {
        match self.level {
            Level::PostSi => self.start.upper,
            Level::Sv => self.order.upper,
            _ => TS_INF,
        }
    }

    /// Buffer a write. No locks are taken until the commit phase.
    pub fn buffer_write(&mut self, key: Key, value: Value) {
        self.write_set.insert(key, value);
    }

    /// Read-own-writes: a buffered value shadows the store.
    pub fn own_write(&self, key: Key) -> Option<&Value> {
        self.write_set.get(&key)
    }
}

/// Rule (4)(a) for PostSI: fix s = s_lower, fold the SIDs of overwritten
/// versions and the start lower bounds of readers found in the
/// anti-dependency table into c_lower, then pick the smallest commit time
/// above both: c = max(c_lower, s) + 1.
pub fn decide_stamp_postsi(
    start: Bound,
    commit_lower: Ts,
    sids_read: &[Ts],
    incoming_rw: &[Ts],
) -> Result<Stamp, AbortReason> {
    if start.check() == BoundCheck::MustAbort {
        return Err(AbortReason::BoundViolation);
    }
    let s = start.lower;
    let mut c_lower = commit_lower;
    for v in sids_read.iter().chain(incoming_rw) {
        c_lower = c_lower.max(*v);
    }
    let c = c_lower.max(s) + 1;
    Ok(Stamp::Interval { start: s, commit: c })
}

/// Rule (4)(a) for SV: a single order, o = max of the lower bound, the SIDs
/// of overwritten versions and the order lower bounds of conflicting readers.
pub fn decide_stamp_sv(order: Bound, sids_read: &[Ts], incoming_rw: &[Ts]) -> Result<Stamp, AbortReason> {
    let mut o_lower = order.lower;
    for v in sids_read.iter().chain(incoming_rw) {
        o_lower = o_lower.max(*v);
    }
    if o_lower > order.upper {
        return Err(AbortReason::BoundViolation);
    }
    Ok(Stamp::Order(o_lower))
}

/// Rule (4)(b) messages implied by a finalized stamp: the cap sent to each
/// ongoing reader t_i with t_i --rw--> txn, and the raise sent to each
/// ongoing writer t_k with txn --rw--> t_k.
pub fn conflict_bound_updates(stamp: Stamp) -> (Ts, Ts) {
    match stamp {
        Stamp::Interval { start, commit } => (commit - 1, start + 1),
        Stamp::Order(o) => (o.saturating_sub(1), o + 1),
        Stamp::Marker(_) => (TS_INF, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tid() -> Tid {
        Tid::new(1, 1)
    }

    #[test]
    fn begin_postsi_initial_bounds() {
        let ctx = TxnCtx::begin(tid(), Level::PostSi);
        assert_eq!(ctx.start, Bound { lower: 0, upper: TS_INF });
        assert_eq!(ctx.commit_lower, 0);
    }

    #[test]
    fn begin_sv_initial_bounds() {
        let ctx = TxnCtx::begin(tid(), Level::Sv);
        assert_eq!(ctx.order, Bound { lower: 0, upper: TS_INF });
    }

    #[test]
    fn begin_cv_keeps_bounds_inert() {
        let mut ctx = TxnCtx::begin(tid(), Level::Cv);
        ctx.fold_access(42);
        ctx.apply_upper_cap(3);
        assert_eq!(ctx.start, Bound::initial());
        assert_eq!(ctx.order, Bound::initial());
        assert!(ctx.bounds_ok());
    }

    #[test]
    fn postsi_read_folds_lower_bounds() {
        let mut ctx = TxnCtx::begin(tid(), Level::PostSi);
        ctx.fold_access(9);
        assert_eq!(ctx.start.lower, 9);
        assert_eq!(ctx.commit_lower, 9);
    }

    #[test]
    fn sv_read_folds_order_lower() {
        let mut ctx = TxnCtx::begin(tid(), Level::Sv);
        ctx.fold_access(9);
        assert_eq!(ctx.order.lower, 9);
    }

    #[test]
    fn own_write_shadows_store_and_last_write_wins() {
        let mut ctx = TxnCtx::begin(tid(), Level::PostSi);
        ctx.buffer_write(5, vec![1]);
        ctx.buffer_write(5, vec![2]);
        assert_eq!(ctx.own_write(5), Some(&vec![2]));
        assert_eq!(ctx.start, Bound::initial());
    }

    #[test]
    fn decide_postsi_initial_state() {
        let st = decide_stamp_postsi(Bound::initial(), 0, &[], &[]).unwrap();
        assert_eq!(st, Stamp::Interval { start: 0, commit: 1 });
    }

    #[test]
    fn decide_postsi_folds_sids_and_incoming() {
        let start = Bound { lower: 5, upper: TS_INF };
        let st = decide_stamp_postsi(start, 3, &[4], &[7]).unwrap();
        assert_eq!(st, Stamp::Interval { start: 5, commit: 8 });
    }

    #[test]
    fn decide_postsi_aborts_on_empty_interval() {
        let start = Bound { lower: 2, upper: 1 };
        assert_eq!(decide_stamp_postsi(start, 0, &[], &[]), Err(AbortReason::BoundViolation));
    }

    #[test]
    fn decide_sv_initial_state() {
        assert_eq!(decide_stamp_sv(Bound::initial(), &[], &[]).unwrap(), Stamp::Order(0));
    }

    #[test]
    fn decide_sv_folds_max() {
        let order = Bound { lower: 3, upper: TS_INF };
        assert_eq!(decide_stamp_sv(order, &[5], &[4]).unwrap(), Stamp::Order(5));
    }

    #[test]
    fn decide_sv_aborts_on_empty_interval() {
        let order = Bound { lower: 6, upper: 5 };
        assert_eq!(decide_stamp_sv(order, &[], &[]), Err(AbortReason::BoundViolation));
    }

    #[test]
    fn conflict_updates_postsi() {
        // stamp (s=5, c=8): readers capped at 7, writers raised to 6.
        let (cap, raise) = conflict_bound_updates(Stamp::Interval { start: 5, commit: 8 });
        assert_eq!(cap, 7);
        assert_eq!(raise, 6);
        let reader = Bound::initial().tighten_upper(cap);
        assert_eq!(reader.upper, 7);
        let mut k = TxnCtx::begin(tid(), Level::PostSi);
        k.commit_lower = 2;
        k.apply_lower_raise(raise);
        assert_eq!(k.commit_lower, 6);
    }

    #[test]
    fn conflict_updates_sv() {
        // order 5: readers capped at 4.
        let (cap, _raise) = conflict_bound_updates(Stamp::Order(5));
        assert_eq!(cap, 4);
        let reader = Bound::initial().tighten_upper(cap);
        assert_eq!(reader.upper, 4);
    }

    #[test]
    fn pinned_retry_limits_reads() {
        let ctx = TxnCtx::begin_pinned(tid(), Level::PostSi, 12);
        assert_eq!(ctx.read_upper(), 12);
        // version with cid=13 is invisible to this attempt
        assert!(13 > ctx.read_upper());
    }

    #[test]
    fn pin_at_infinity_is_normal_begin() {
        let ctx = TxnCtx::begin_pinned(tid(), Level::PostSi, TS_INF);
        assert_eq!(ctx.start, Bound::initial());
    }

    #[test]
    fn retry_pin_comes_from_violated_upper() {
        let mut ctx = TxnCtx::begin(tid(), Level::PostSi);
        ctx.apply_upper_cap(7);
        ctx.merge_remote_lower(9);
        assert!(!ctx.bounds_ok());
        assert_eq!(ctx.pin_for_retry(), 7);
    }
}
